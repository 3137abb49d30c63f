import torch
import torch.nn as nn

from .backbone import check_finite


class SpatialAttention(nn.Module):
    """Single-channel 7x7x7 score map, sigmoid-gated and broadcast over channels."""

    def __init__(self, channels, kernel_size=7):
        super().__init__()
        self.conv = nn.Conv3d(channels, 1, kernel_size, padding=kernel_size // 2)

    def scores(self, x):
        return torch.sigmoid(self.conv(x))

    def forward(self, x):
        return self.scores(x) * x


class ChannelAttention(nn.Module):
    """Per-channel scores from concatenated global max and mean pools."""

    def __init__(self, channels):
        super().__init__()
        self.fc = nn.Linear(2 * channels, channels)

    def scores(self, x):
        flat = x.flatten(2)
        desc = torch.cat([flat.amax(dim=2), flat.mean(dim=2)], dim=1)
        return torch.sigmoid(self.fc(desc))

    def forward(self, x):
        return self.scores(x)[:, :, None, None, None] * x


class SCAM(nn.Module):
    """Parallel spatial and channel attention, summed."""

    def __init__(self, channels, kernel_size=7):
        super().__init__()
        self.spatial = SpatialAttention(channels, kernel_size)
        self.channel = ChannelAttention(channels)

    def forward(self, x):
        check_finite(x, "SCAM")
        return self.spatial(x) + self.channel(x)

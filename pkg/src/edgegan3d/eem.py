import torch
import torch.nn as nn


class EdgeEnhance(nn.Module):
    """Boundary branch on the stride-1 encoder features.

    Returns the 3x3x3 edge features (always used downstream) and, unless
    ``with_prob`` is false, the sigmoid edge probability map.
    """

    def __init__(self, channels=16):
        super().__init__()
        self.channels = channels
        self.features = nn.Conv3d(channels, channels, 3, padding=1)
        self.project = nn.Conv3d(channels, 1, 1)

    def forward(self, e1, input_size=None, with_prob=True):
        if e1.shape[1] != self.channels:
            raise ValueError(f"edge branch expects {self.channels} channels, got {e1.shape[1]}")
        if input_size is not None and tuple(e1.shape[2:]) != tuple(input_size):
            raise ValueError(
                f"edge branch needs stride-1 features of size {tuple(input_size)}, got {tuple(e1.shape[2:])}"
            )
        feats = self.features(e1)
        prob = torch.sigmoid(self.project(feats)) if with_prob else None
        return feats, prob

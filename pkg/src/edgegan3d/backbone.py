import torch
import torch.nn as nn
import torch.nn.functional as F

# slow running-estimate update (PyTorch momentum is the weight of the new batch)
BN_MOMENTUM = 0.1


def check_finite(x: torch.Tensor, where: str):
    if not torch.isfinite(x).all():
        raise ValueError(f"{where}: input contains non-finite values")


def check_divisible(shape, factor: int = 8):
    for name, n in zip(("depth", "height", "width"), shape):
        if n % factor:
            raise ValueError(f"{name} {n} not divisible by {factor}")


def upsample_to(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="trilinear", align_corners=False)


class CBR(nn.Module):
    """Two (3x3x3 conv -> BN -> ReLU) groups; spatial dims preserved."""

    def __init__(self, in_channels, out_channels, norm=True):
        super().__init__()
        layers = []
        for c_in in (in_channels, out_channels):
            layers += [
                nn.Conv3d(c_in, out_channels, 3, padding=1),
                nn.BatchNorm3d(out_channels, momentum=BN_MOMENTUM) if norm else nn.Identity(),
                nn.ReLU(inplace=True),
            ]
        self.block = nn.Sequential(*layers)
        self.out_channels = out_channels

    def forward(self, x):
        check_finite(x, "CBR")
        return self.block(x)


class Encoder(nn.Module):
    def __init__(self, channels=(16, 32, 64, 128), in_channels=1):
        super().__init__()
        if any(b <= a for a, b in zip(channels, channels[1:])):
            raise ValueError(f"channels must be strictly increasing, got {channels}")
        ins = (in_channels,) + tuple(channels[:-1])
        self.stages = nn.ModuleList(CBR(i, o) for i, o in zip(ins, channels))
        self.pool = nn.MaxPool3d(2, stride=2)

    def forward(self, x):
        check_divisible(x.shape[2:])
        feats = []
        for i, stage in enumerate(self.stages):
            x = stage(x if i == 0 else self.pool(x))
            feats.append(x)
        return tuple(feats)


class Decoder(nn.Module):
    """Three (x2 trilinear upsample -> concat skip -> CBR) stages.

    ``bottom_channels`` and ``skip_channels`` are the widths actually fed in,
    which grow when detail-compensation features are concatenated.
    """

    def __init__(self, channels=(16, 32, 64, 128), bottom_channels=None, skip_channels=None):
        super().__init__()
        bottom = bottom_channels or channels[3]
        skips = skip_channels or tuple(channels[:3])
        self.skip_channels = tuple(skips)
        stages = []
        c_prev = bottom
        for level in (2, 1, 0):
            stages.append(CBR(c_prev + skips[level], channels[level]))
            c_prev = channels[level]
        self.stages = nn.ModuleList(stages)

    def forward(self, bottom, skips):
        outs = []
        x = bottom
        for stage, level in zip(self.stages, (2, 1, 0)):
            skip = skips[level]
            expected = tuple(2 * n for n in x.shape[2:])
            if tuple(skip.shape[2:]) != expected:
                raise ValueError(
                    f"skip {level + 1} shape mismatch: expected spatial dims {expected}, "
                    f"got {tuple(skip.shape[2:])}"
                )
            if skip.shape[1] != self.skip_channels[level]:
                raise ValueError(
                    f"skip {level + 1} channel mismatch: expected {self.skip_channels[level]}, got {skip.shape[1]}"
                )
            x = F.interpolate(x, size=expected, mode="trilinear", align_corners=False)
            x = stage(torch.cat([x, skip], dim=1))
            outs.append(x)
        # (F2, F1, F0) at strides 4, 2, 1
        return tuple(outs)

"""Detail compensation: a stride-1-stem 3D ResNet-34 whose four stage
outputs are squeezed to the encoder widths by 1x1x1 convolutions."""

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .backbone import BN_MOMENTUM, check_divisible, upsample_to

STAGE_CHANNELS = (64, 128, 256, 512)
RESNET34_BLOCKS = (3, 4, 6, 3)


class BasicBlock(nn.Module):
    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(out_channels, momentum=BN_MOMENTUM)
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(out_channels, momentum=BN_MOMENTUM)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv3d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm3d(out_channels, momentum=BN_MOMENTUM),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class ResNet3D(nn.Module):
    """3D ResNet-34 trunk with a stride-1 stem and no stem pooling.

    Parameter names follow the torchvision/Med3D layout (``conv1``,
    ``bn1``, ``layer1.0.conv1`` ...) so external state dicts map directly.
    """

    def __init__(self, blocks=RESNET34_BLOCKS, channels=STAGE_CHANNELS, in_channels=1):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, channels[0], 7, stride=1, padding=3, bias=False)
        self.bn1 = nn.BatchNorm3d(channels[0], momentum=BN_MOMENTUM)
        self.relu = nn.ReLU(inplace=True)
        c_in = channels[0]
        for i, (n, c) in enumerate(zip(blocks, channels)):
            stride = 1 if i == 0 else 2
            layers = [BasicBlock(c_in, c, stride)] + [BasicBlock(c, c) for _ in range(n - 1)]
            setattr(self, f"layer{i + 1}", nn.Sequential(*layers))
            c_in = c
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        x = self.relu(self.bn1(self.conv1(x)))
        outs = []
        for i in range(1, 5):
            x = getattr(self, f"layer{i}")(x)
            outs.append(x)
        return tuple(outs)


class DetailCompensation(nn.Module):
    def __init__(self, squeeze_channels=(16, 32, 64, 128), pretrained=None, frozen=False,
                 stage_channels=STAGE_CHANNELS, blocks=RESNET34_BLOCKS):
        super().__init__()
        self.stage_channels = tuple(stage_channels)
        self.resnet = ResNet3D(blocks, stage_channels)
        self.squeezers = nn.ModuleList(
            nn.Conv3d(c, s, 1) for c, s in zip(stage_channels, squeeze_channels)
        )
        if pretrained is not None:
            load_pretrained(self.resnet, pretrained)
        self.frozen = frozen
        if frozen:
            for p in self.resnet.parameters():
                p.requires_grad_(False)

    def train(self, mode=True):
        super().train(mode)
        if self.frozen:
            # frozen trunk keeps its running statistics too
            self.resnet.eval()
        return self

    def features(self, x, sizes=None):
        """Stage outputs N1..N4, resampled onto the encoder stage sizes."""
        check_divisible(x.shape[2:])
        if sizes is None:
            sizes = [tuple(n // 2**i for n in x.shape[2:]) for i in range(4)]
        feats = self.resnet(x)
        return tuple(upsample_to(f, s) for f, s in zip(feats, sizes))

    def squeeze(self, n, i):
        if n.shape[1] != self.stage_channels[i]:
            raise ValueError(
                f"squeeze {i + 1}: expected {self.stage_channels[i]} input channels, got {n.shape[1]}"
            )
        return self.squeezers[i](n)

    def forward(self, x, sizes=None):
        return tuple(self.squeeze(n, i) for i, n in enumerate(self.features(x, sizes)))


def read_weight_archive(path) -> dict:
    """Named tensors from ``.npz`` or a torch state dict (``.pt``/``.pth``)."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            state = {k: torch.from_numpy(z[k]) for k in z.files}
    else:
        state = torch.load(path, map_location="cpu", weights_only=True)
        if "state_dict" in state:
            state = state["state_dict"]
    return {k.removeprefix("module."): v for k, v in state.items()}


def load_pretrained(model: nn.Module, path):
    """Validate every name and shape in the archive before assigning any.

    A 3-channel stem kernel is averaged over its input channels. Entries
    beyond the trunk (e.g. a classification head) are ignored.
    """
    source = read_weight_archive(path)
    target = model.state_dict()
    missing = [k for k in target if k not in source and not k.endswith("num_batches_tracked")]
    if missing:
        raise ValueError(f"pretrained weights missing layer {missing[0]} ({len(missing)} missing in total)")
    stem = source.get("conv1.weight")
    if stem is not None and stem.ndim == 5 and stem.shape[1] == 3 and target["conv1.weight"].shape[1] == 1:
        source["conv1.weight"] = stem.mean(dim=1, keepdim=True)
    for k, v in target.items():
        if k in source and tuple(source[k].shape) != tuple(v.shape):
            raise ValueError(
                f"pretrained weight shape mismatch at layer {k}: expected {tuple(v.shape)}, "
                f"got {tuple(source[k].shape)}"
            )
    model.load_state_dict({k: source[k] for k in target if k in source}, strict=False)


def save_weight_archive(model: nn.Module, path):
    np.savez(path, **{k: v.detach().cpu().numpy() for k, v in model.state_dict().items()})

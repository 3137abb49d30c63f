"""Global feature extractor and the full edge-aware segmentation network."""

import torch
import torch.nn as nn

from .backbone import BN_MOMENTUM, Decoder, Encoder, check_divisible, check_finite, upsample_to
from .config import ModelConfig
from .dcm import DetailCompensation
from .eem import EdgeEnhance
from .scam import SCAM


def conv_bn_relu(in_channels, out_channels, kernel_size):
    return nn.Sequential(
        nn.Conv3d(in_channels, out_channels, kernel_size, padding=kernel_size // 2),
        nn.BatchNorm3d(out_channels, momentum=BN_MOMENTUM),
        nn.ReLU(inplace=True),
    )


class GlobalFeatureExtractor(nn.Module):
    """Decoder fusion -> dense 7x7x7 blocks -> edge injection -> spatial gate -> head."""

    def __init__(self, channels=(16, 32, 64, 128), fusion_channels=None, edge_channels=None,
                 n_dense=4, dense_kernel=7):
        super().__init__()
        fusion = fusion_channels or channels[0]
        edge = edge_channels or channels[0]
        growth = max(1, fusion // n_dense)
        self.reduce = nn.Conv3d(channels[0] + channels[1] + channels[2], fusion, 1)
        self.dense = nn.ModuleList(
            conv_bn_relu(fusion + i * growth, growth, dense_kernel) for i in range(n_dense)
        )
        gated = fusion + n_dense * growth + edge
        self.gate = nn.Conv3d(gated, 1, 3, padding=1)
        self.head = nn.Sequential(conv_bn_relu(gated, channels[0], 3), conv_bn_relu(channels[0], channels[0], 3))
        self.out = nn.Conv3d(channels[0], 1, 1)

    def forward(self, f0, f1, f2, edge_features):
        size = tuple(f0.shape[2:])
        for name, f, k in (("F1", f1, 2), ("F2", f2, 4), ("edge features", edge_features, 1)):
            expected = tuple(n // k for n in size)
            if tuple(f.shape[2:]) != expected:
                raise ValueError(f"{name} stride mismatch: expected spatial dims {expected}, got {tuple(f.shape[2:])}")
        x = self.reduce(torch.cat([f0, upsample_to(f1, size), upsample_to(f2, size)], dim=1))
        feats = [x]
        for block in self.dense:
            feats.append(block(torch.cat(feats, dim=1)))
        x = torch.cat(feats + [edge_features], dim=1)
        x = torch.sigmoid(self.gate(x)) * x
        return torch.sigmoid(self.out(self.head(x)))


class EASNet(nn.Module):
    """Edge-aware segmentation network (the generator).

    Encoder and detail-compensation trunk run in parallel; squeezed trunk
    features are attention-refined and concatenated onto every encoder
    stage before decoding. Each of ``dcm``, ``scam`` and ``eem`` can be
    switched off in ``ModelConfig`` for ablations.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        ch = tuple(config.channels)
        self.encoder = Encoder(ch)
        extra = ch if config.dcm else (0, 0, 0, 0)
        self.dcm = DetailCompensation(ch, config.pretrained_dcm, config.freeze_dcm) if config.dcm else None
        self.scam = nn.ModuleList(SCAM(c) for c in ch) if config.dcm and config.scam else None
        self.decoder = Decoder(
            ch, bottom_channels=ch[3] + extra[3], skip_channels=tuple(c + e for c, e in zip(ch[:3], extra[:3]))
        )
        self.eem = EdgeEnhance(ch[0]) if config.eem else None
        self.gfe = GlobalFeatureExtractor(ch, config.fusion_channels)

    def stages(self, x, with_edge=True):
        """All named intermediate feature maps of one forward pass."""
        check_finite(x, "EASNet input")
        check_divisible(x.shape[2:])
        out = {}
        enc = self._stage("encoder", self.encoder, x)
        out.update({f"e{i + 1}": e for i, e in enumerate(enc)})
        fused = list(enc)
        if self.dcm is not None:
            sizes = [e.shape[2:] for e in enc]
            raw = self._stage("dcm", self.dcm.features, x, sizes)
            for i, n in enumerate(raw):
                out[f"n{i + 1}"] = n
                s = self._stage(f"squeeze {i + 1}", self.dcm.squeeze, n, i)
                out[f"sq{i + 1}"] = s
                if self.scam is not None:
                    s = self._stage(f"scam {i + 1}", self.scam[i], s)
                    out[f"scam{i + 1}"] = s
                fused[i] = torch.cat([enc[i], s], dim=1)
        f2, f1, f0 = self._stage("decoder", self.decoder, fused[3], fused[:3])
        out.update(f2=f2, f1=f1, f0=f0)
        if self.eem is not None:
            edge_feats, edge_prob = self._stage("edge branch", self.eem, enc[0], x.shape[2:], with_edge)
        else:
            edge_feats, edge_prob = enc[0], None
        out.update(edge_features=edge_feats, edge=edge_prob)
        out["seg"] = self._stage("global feature extractor", self.gfe, f0, f1, f2, edge_feats)
        return out

    def forward(self, x, with_edge=True):
        out = self.stages(x, with_edge)
        return out["seg"], out["edge"]

    @staticmethod
    def _stage(name, fn, *args):
        try:
            return fn(*args)
        except ValueError as exc:
            raise ValueError(f"[{name}] {exc}") from exc

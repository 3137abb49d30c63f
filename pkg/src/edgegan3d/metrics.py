"""Overlap and distance metrics for binary segmentations."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

# above this many point pairs the directed distances go through a distance transform
BRUTE_FORCE_PAIRS = 4_000_000


def _pair(P, G):
    P = np.asarray(getattr(P, "values", P)).astype(bool)
    G = np.asarray(getattr(G, "values", G)).astype(bool)
    if P.shape != G.shape:
        raise ValueError(f"mask shapes differ: {P.shape} vs {G.shape}")
    return P, G


def binarize(prob, threshold=0.5) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def dice(P, G) -> float:
    P, G = _pair(P, G)
    total = int(P.sum()) + int(G.sum())
    if total == 0:
        raise ValueError("undefined overlap: both masks are empty")
    return 2 * int((P & G).sum()) / total


def jaccard(P, G) -> float:
    P, G = _pair(P, G)
    union = int((P | G).sum())
    if union == 0:
        raise ValueError("undefined overlap: both masks are empty")
    return int((P & G).sum()) / union


def precision(P, G) -> float:
    P, G = _pair(P, G)
    n = int(P.sum())
    if n == 0:
        raise ValueError("precision undefined: prediction is empty")
    return int((P & G).sum()) / n


def recall(P, G) -> float:
    P, G = _pair(P, G)
    n = int(G.sum())
    if n == 0:
        raise ValueError("recall undefined: ground truth is empty")
    return int((P & G).sum()) / n


def _directed_brute(a: np.ndarray, b: np.ndarray, spacing) -> float:
    """max over a of min over b of squared distance, chunked over a."""
    s = np.asarray(spacing, dtype=np.float64)
    best = 0.0
    step = max(1, BRUTE_FORCE_PAIRS // max(len(b), 1))
    for i in range(0, len(a), step):
        # integer offsets are exact; scale after subtracting
        diff = (a[i:i + step, None, :] - b[None, :, :]) * s
        d2 = (diff * diff).sum(axis=-1)
        best = max(best, float(d2.min(axis=1).max()))
    return best


def _directed_edt(A: np.ndarray, B: np.ndarray, spacing) -> float:
    dist = ndimage.distance_transform_edt(~B, sampling=spacing)
    return float(dist[A].max())


def hausdorff(P, G, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance between foreground voxel centres, in
    the units of ``spacing`` (unit spacing gives voxels)."""
    P, G = _pair(P, G)
    if not P.any() or not G.any():
        raise ValueError("Hausdorff undefined for empty set")
    if np.array_equal(P, G):
        return 0.0
    a = np.argwhere(P).astype(np.float64)
    b = np.argwhere(G).astype(np.float64)
    if len(a) * len(b) <= BRUTE_FORCE_PAIRS:
        return float(np.sqrt(max(_directed_brute(a, b, spacing), _directed_brute(b, a, spacing))))
    return max(_directed_edt(P, G, spacing), _directed_edt(G, P, spacing))


@dataclass
class MetricReport:
    case_id: str
    dice: float
    jaccard: float
    hd: float
    precision: float
    recall: float


def evaluate_case(pred, gt, spacing=(1.0, 1.0, 1.0), case_id: str = "") -> MetricReport:
    P, G = _pair(pred, gt)
    return MetricReport(
        case_id=case_id,
        dice=dice(P, G),
        jaccard=jaccard(P, G),
        hd=hausdorff(P, G, spacing),
        precision=precision(P, G),
        recall=recall(P, G),
    )


def summarize(reports: list[MetricReport]) -> dict:
    out = {}
    for key in ("dice", "jaccard", "hd", "precision", "recall"):
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        # empty predictions carry an infinite distance
        with np.errstate(invalid="ignore"):
            out[key] = float(vals.mean())
            out[key + "_std"] = float(vals.std())
    return out


CSV_FIELDS = ("case_id", "dice", "jaccard", "hd_mm", "precision", "recall")


def write_report_csv(path, reports: list[MetricReport]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for r in reports:
            d = asdict(r)
            w.writerow([r.case_id] + [f"{d[k]:.4f}" for k in ("dice", "jaccard", "hd", "precision", "recall")])


def read_report_csv(path) -> list[MetricReport]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        MetricReport(r["case_id"], float(r["dice"]), float(r["jaccard"]), float(r["hd_mm"]),
                     float(r["precision"]), float(r["recall"]))
        for r in rows
    ]

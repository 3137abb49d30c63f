"""Volumes, masks and edge maps: file I/O, normalization, resampling,
synthetic ultrasound-like phantoms and boundary extraction."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

Triple = tuple[float, float, float]

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Raised when a header/payload pair cannot be read."""


@dataclass(frozen=True)
class Volume:
    values: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D grid, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("volume contains non-finite intensities")
        _check_spacing(self.spacing)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True)
class SegMask:
    values: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {values.shape}")
        if not np.isin(values, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        _check_spacing(self.spacing)
        object.__setattr__(self, "values", values.astype(np.uint8))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


class EdgeMap(SegMask):
    """Binary map of boundary voxels of a :class:`SegMask`."""


def _check_spacing(spacing):
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive values, got {spacing}")


# ---------------------------------------------------------------------------
# file I/O: ASCII ``.hdr`` sidecar + little-endian ``.raw`` payload


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".hdr", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".hdr"), p.with_suffix(".raw")


def _read_header(hdr: Path) -> dict:
    if not hdr.exists():
        raise FileNotFoundError(f"missing header file {hdr}")
    fields = {}
    for lineno, line in enumerate(hdr.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{hdr}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()

    def numbers(key, cast, required=True, default=None):
        if key not in fields:
            if required:
                raise VolumeFormatError(f"{hdr}: header field '{key}' is missing")
            return default
        try:
            out = tuple(cast(t) for t in fields[key].split())
        except ValueError:
            raise VolumeFormatError(f"{hdr}: header field '{key}' is malformed: {fields[key]!r}") from None
        if len(out) != 3:
            raise VolumeFormatError(f"{hdr}: header field '{key}' needs 3 values, got {len(out)}")
        return out

    shape = numbers("shape", int)
    if min(shape) < 1:
        raise VolumeFormatError(f"{hdr}: header field 'shape' must be positive, got {shape}")
    spacing = numbers("spacing", float)
    if min(spacing) <= 0:
        raise VolumeFormatError(f"{hdr}: header field 'spacing' must be positive, got {spacing}")
    origin = numbers("origin", float, required=False, default=(0.0, 0.0, 0.0))
    dtype = fields.get("dtype")
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"{hdr}: header field 'dtype' must be one of {sorted(_DTYPES)}, got {dtype!r}")
    byteorder = fields.get("byteorder", "little")
    if byteorder != "little":
        raise VolumeFormatError(f"{hdr}: header field 'byteorder' must be 'little', got {byteorder!r}")
    return {"shape": shape, "spacing": spacing, "origin": origin, "dtype": dtype}


def _read_payload(path) -> tuple[np.ndarray, dict]:
    hdr, raw = _paths(path)
    meta = _read_header(hdr)
    if not raw.exists():
        raise FileNotFoundError(f"missing payload file {raw}")
    dtype = _DTYPES[meta["dtype"]]
    data = raw.read_bytes()
    expected = int(np.prod(meta["shape"])) * dtype.itemsize
    if len(data) != expected:
        raise VolumeFormatError(
            f"{raw}: byte-count mismatch: header 'shape' {meta['shape']} needs {expected} bytes, "
            f"file holds {len(data)}"
        )
    return np.frombuffer(data, dtype=dtype).reshape(meta["shape"]), meta


def _write(path, values: np.ndarray, code: str, spacing, origin=(0.0, 0.0, 0.0)):
    hdr, raw = _paths(path)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    d, h, w = values.shape
    hdr.write_text(
        f"shape={d} {h} {w}\n"
        f"spacing={' '.join(repr(float(s)) for s in spacing)}\n"
        f"origin={' '.join(repr(float(o)) for o in origin)}\n"
        f"dtype={code}\n"
        "byteorder=little\n"
    )
    raw.write_bytes(np.ascontiguousarray(values, dtype=_DTYPES[code]).tobytes())


def load_volume(path) -> Volume:
    values, meta = _read_payload(path)
    return Volume(values.astype(np.float32), meta["spacing"], meta["origin"])


def save_volume(path, v: Volume):
    _write(path, v.values, "f32", v.spacing, v.origin)


def load_mask(path) -> SegMask:
    values, meta = _read_payload(path)
    try:
        return SegMask(values, meta["spacing"])
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from None


def save_mask(path, m: SegMask):
    _write(path, m.values, "u8", m.spacing)


# ---------------------------------------------------------------------------
# preprocessing


def normalize(v: Volume) -> Volume:
    """Z-score intensity normalization."""
    x = v.values.astype(np.float64)
    std = x.std()
    if std == 0.0 or x.max() == x.min():
        raise ValueError("degenerate intensity distribution: volume has a single value")
    out = (x - x.mean()) / std
    # a second pass removes the float32 rounding bias left by the first
    out = out.astype(np.float32).astype(np.float64)
    out = (out - out.mean()) / out.std()
    return Volume(out.astype(np.float32), v.spacing, v.origin)


def resample(v, target_shape, mode: str = "trilinear"):
    """Resample a Volume (or SegMask with ``mode='nearest'``) onto ``target_shape``."""
    target_shape = tuple(int(t) for t in target_shape)
    if len(target_shape) != 3 or min(target_shape) < 1:
        raise ValueError(f"target_shape must be three positive sizes, got {target_shape}")
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    spacing = tuple(s * n / t for s, n, t in zip(v.spacing, v.shape, target_shape))
    x = torch.from_numpy(np.asarray(v.values, dtype=np.float32))[None, None]
    if mode == "trilinear":
        y = F.interpolate(x, size=target_shape, mode="trilinear", align_corners=False)
    else:
        y = F.interpolate(x, size=target_shape, mode="nearest")
    out = y[0, 0].numpy()
    if isinstance(v, SegMask):
        if mode != "nearest":
            out = out >= 0.5
        return type(v)(out.astype(np.uint8), spacing)
    return Volume(out, spacing, v.origin)


# ---------------------------------------------------------------------------
# synthetic phantoms


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    shape: tuple[int, int, int] = (32, 48, 48)
    # per-axis (min, max) semi-axis length in voxels; None derives it from shape
    semi_axes: tuple[tuple[float, float], ...] | None = None
    deformation: float = 0.15
    speckle: float = 1.5
    contrast: float = 0.35
    spacing: Triple = (1.0, 1.0, 1.0)
    center_jitter: float = 0.05

    def axes_range(self) -> tuple[tuple[float, float], ...]:
        if self.semi_axes is not None:
            return tuple((float(lo), float(hi)) for lo, hi in self.semi_axes)
        # 20-30% of each extent, capped so the deformed gland keeps its margin
        return tuple(
            (0.2 * n, min(0.3 * n, ((n - 1) / 2 - 2 - self.center_jitter * n) / (1 + self.deformation)))
            for n in self.shape
        )

    def validate(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"phantom shape must be three positive sizes, got {self.shape}")
        if self.deformation < 0 or self.speckle < 0:
            raise ValueError("deformation and speckle must be non-negative")
        if not 0 < self.contrast < 1:
            raise ValueError(f"contrast must be in (0, 1), got {self.contrast}")
        for axis, (n, (lo, hi)) in enumerate(zip(self.shape, self.axes_range())):
            if not 0 < lo <= hi:
                raise ValueError(f"axis {axis}: semi-axis range ({lo}, {hi}) is not increasing and positive")
            reach = hi * (1 + self.deformation) + self.center_jitter * n
            if reach > (n - 1) / 2 - 2:
                raise ValueError(
                    f"axis {axis}: semi-axis up to {hi} (deformed reach {reach:.2f}) leaves less than a "
                    f"2-voxel margin in extent {n}"
                )


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, SegMask]:
    """Deformed-ellipsoid gland in a speckled, shaded background.

    The result is a pure function of ``spec``: all randomness comes from a
    generator seeded by ``spec.seed``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    shape = tuple(spec.shape)

    axes = np.array([rng.uniform(lo, hi) for lo, hi in spec.axes_range()])
    center = np.array([(n - 1) / 2 + rng.uniform(-1, 1) * spec.center_jitter * n for n in shape])
    waves = rng.normal(size=(4, 3)) * 2.5
    phases = rng.uniform(0, 2 * np.pi, size=4)
    weights = rng.uniform(0.5, 1.0, size=4)
    weights /= weights.sum()

    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"), axis=-1)
    q = (grid - center) / axes
    r = np.linalg.norm(q, axis=-1)
    u = q / np.maximum(r, 1e-12)[..., None]
    bump = np.sin(u @ waves.T + phases) @ weights
    mask = r <= 1.0 + spec.deformation * bump

    image = np.where(mask, 1.0 - spec.contrast, 1.0)
    if spec.speckle > 0:
        rayleigh = rng.rayleigh(1.0, size=shape)
        speck = ndimage.gaussian_filter(rayleigh, sigma=1.0, truncate=1.0)
        speck /= speck.mean()
        depth = np.linspace(-1.0, 1.0, shape[0])[:, None, None]
        shading = 1.0 - min(0.5, 0.1 * spec.speckle) * depth
        image = image * speck**spec.speckle * shading

    frac = mask.mean()
    if not 0.02 <= frac <= 0.40:
        raise ValueError(f"phantom foreground fraction {frac:.3f} outside [0.02, 0.40]")
    return (
        Volume(image.astype(np.float32), spec.spacing),
        SegMask(mask.astype(np.uint8), spec.spacing),
    )


# ---------------------------------------------------------------------------
# edges

_SIX = ndimage.generate_binary_structure(3, 1)


def extract_edge_map(m: SegMask, mode: str = "boundary") -> EdgeMap:
    """Foreground voxels touching the background.

    ``mode='boundary'`` marks foreground voxels with at least one
    6-adjacent background voxel (outside the grid counts as background).
    ``mode='canny'`` runs a 2D Canny detector on every depth slice and keeps
    the detections that fall on foreground.
    """
    fg = m.values.astype(bool)
    if mode == "boundary":
        inner = ndimage.binary_erosion(fg, structure=_SIX, border_value=0)
        edge = fg & ~inner
    elif mode == "canny":
        from skimage.feature import canny

        edge = np.zeros_like(fg)
        for k in range(fg.shape[0]):
            if fg[k].any():
                edge[k] = canny(fg[k].astype(np.float64), sigma=1.0, low_threshold=0.1, high_threshold=0.3)
        edge &= fg
    else:
        raise ValueError(f"unknown edge mode {mode!r}")
    return EdgeMap(edge.astype(np.uint8), m.spacing)


# ---------------------------------------------------------------------------
# slice dumps


def write_pgm(path, image: np.ndarray):
    """Write a 2D array as 8-bit binary PGM, min-max scaled."""
    a = np.asarray(image, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = np.zeros(a.shape, np.uint8) if hi == lo else np.round((a - lo) / (hi - lo) * 255).astype(np.uint8)
    h, w = scaled.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(scaled.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise VolumeFormatError(f"{path}: not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def dump_slices(volume: np.ndarray, out_dir, prefix: str = "slice") -> list[str]:
    """One PGM per depth slice of a 3D array."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for k in range(volume.shape[0]):
        p = os.path.join(out_dir, f"{prefix}_{k:03d}.pgm")
        write_pgm(p, volume[k])
        paths.append(p)
    return paths

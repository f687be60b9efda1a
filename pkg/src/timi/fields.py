"""Dense latent-field arithmetic.

A latent field is a float64 array of shape (C, D, H, W): channel-major, with
row-major spatial order (D outer, W inner).  The flattened token index of
voxel (d, h, w) is ``v = (d * H + h) * W + w``; every module in the package
relies on this one layout so masks, attention rows, and gradients line up
bit-exactly.

All reductions here use numpy's fixed left-to-right pairwise order, so
results are reproducible across runs on the same build.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import TimiError


def field_std(f: np.ndarray) -> float:
    """Population standard deviation (divide by N) over all entries.

    Two-pass with exactly-rounded sums, so the result is bit-identical
    under any permutation of the entries.
    """
    if f.size == 0:
        raise TimiError("empty-field", "std of an empty field")
    flat = f.ravel()
    mean = math.fsum(flat) / flat.size
    var = math.fsum((flat - mean) ** 2) / flat.size
    return math.sqrt(var)


def field_max_abs(f: np.ndarray) -> float:
    """Maximum absolute entry."""
    if f.size == 0:
        raise TimiError("empty-field", "max-abs of an empty field")
    return float(np.max(np.abs(f)))


def kernel_radius(sigma: float) -> int:
    """Truncation radius R = ceil(3 sigma)."""
    return int(math.ceil(3.0 * sigma))


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian taps, length 2R + 1, center at index R.

    Weights are exp(-i^2 / (2 sigma^2)) for i in [-R, R], divided by their
    sum, so they total 1 and are symmetric with the maximum at the center.
    """
    if sigma <= 0:
        raise TimiError("invalid-sigma", f"sigma must be > 0, got {sigma}")
    r = kernel_radius(sigma)
    i = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(i * i) / (2.0 * sigma * sigma))
    return w / w.sum()


def gaussian_smooth(f: np.ndarray, sigma: float) -> np.ndarray:
    """Separable per-channel 3D Gaussian blur with edge-replicate padding.

    Replicate padding keeps constant fields exactly fixed and never leaks
    mass at the boundary; with the unit-sum kernel every output entry is a
    convex combination of inputs, so max |output| <= max |input|.
    """
    w = gaussian_kernel_1d(sigma)
    out = f
    for axis in (1, 2, 3):  # spatial axes of (C, D, H, W)
        out = correlate1d(out, w, axis=axis, mode="nearest")
    return out


def assert_finite(f: np.ndarray, what: str = "field") -> np.ndarray:
    if not np.all(np.isfinite(f)):
        raise TimiError("non-finite", f"{what} contains NaN or Inf")
    return f


# ---------------------------------------------------------------------------
# Blob serialization: "<stem>.json" sidecar header plus "<stem>.f64" payload
# of raw little-endian float64 in C order.
# ---------------------------------------------------------------------------

_LAYOUT = "channel-major,row-major"


def save_blob(stem: str | Path, arr: np.ndarray) -> None:
    """Write ``stem.json`` + ``stem.f64`` for a float64 array of any shape."""
    stem = Path(stem)
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    header = {"shape": list(arr.shape), "dtype": "f64", "layout": _LAYOUT}
    stem.with_suffix(".json").write_text(json.dumps(header) + "\n")
    stem.with_suffix(".f64").write_bytes(arr.astype("<f8").tobytes(order="C"))


def load_blob(stem: str | Path) -> np.ndarray:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    if header.get("dtype") != "f64":
        raise TimiError("bad-blob", f"unsupported dtype {header.get('dtype')!r}")
    shape = tuple(int(s) for s in header["shape"])
    data = np.frombuffer(stem.with_suffix(".f64").read_bytes(), dtype="<f8")
    if data.size != int(np.prod(shape)):
        raise TimiError("bad-blob", f"payload size {data.size} != shape {shape}")
    return data.reshape(shape).copy()


def save_field(stem: str | Path, field: np.ndarray) -> None:
    """Save a (C, D, H, W) latent field (shape is validated)."""
    if field.ndim != 4:
        raise TimiError("bad-blob", f"latent field must be 4D, got {field.shape}")
    save_blob(stem, field)


def load_field(stem: str | Path) -> np.ndarray:
    field = load_blob(stem)
    if field.ndim != 4:
        raise TimiError("bad-blob", f"latent field must be 4D, got {field.shape}")
    return field

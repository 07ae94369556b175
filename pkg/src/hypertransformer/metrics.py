"""Full-reference quality measures for pansharpened cubes.

Every function takes ``(x, x_ref)`` as ``[C, H, W]`` arrays (or objects with
a ``.data`` array) and assumes values normalized to [0, 1].
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, DimensionError


def _pair(x, x_ref) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(x, "data", x), dtype=np.float64)
    b = np.asarray(getattr(x_ref, "data", x_ref), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cube shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise DimensionError(f"cubes must be [C,H,W], got {a.shape}")
    return a, b


def cc(x, x_ref) -> float:
    """Mean over bands of the Pearson correlation coefficient."""
    a, b = _pair(x, x_ref)
    c = a.shape[0]
    a = a.reshape(c, -1) - a.reshape(c, -1).mean(axis=1, keepdims=True)
    b = b.reshape(c, -1) - b.reshape(c, -1).mean(axis=1, keepdims=True)
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    for band in range(c):
        if na[band] == 0 or nb[band] == 0:
            which = "prediction" if na[band] == 0 else "reference"
            raise DegenerateInputError(f"band {band} has zero variance in the {which}")
    return float(np.mean((a * b).sum(axis=1) / (na * nb)))


def sam(x, x_ref) -> float:
    """Mean spectral angle in degrees."""
    a, b = _pair(x, x_ref)
    c = a.shape[0]
    a = a.reshape(c, -1)
    b = b.reshape(c, -1)
    na = np.sqrt((a * a).sum(axis=0))
    nb = np.sqrt((b * b).sum(axis=0))
    bad = np.flatnonzero((na == 0) | (nb == 0))
    if bad.size:
        raise DegenerateInputError(f"{bad.size} pixel(s) have a zero-norm spectrum (first at flat index {bad[0]})")
    # half-angle form: exact zero for parallel spectra, no arccos cancellation near 0
    ua, ub = a / na, b / nb
    ang = 2.0 * np.arctan2(np.sqrt(((ua - ub) ** 2).sum(axis=0)), np.sqrt(((ua + ub) ** 2).sum(axis=0)))
    return float(np.degrees(np.mean(ang)))


def rmse(x, x_ref) -> float:
    a, b = _pair(x, x_ref)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(x, x_ref, peak: float = 1.0) -> float:
    """Global PSNR in dB; identical cubes give ``inf``."""
    e = rmse(x, x_ref)
    if e == 0:
        return math.inf
    return float(20.0 * np.log10(peak / e))


def ergas(x, x_ref, ratio: int = 4) -> float:
    a, b = _pair(x, x_ref)
    c = a.shape[0]
    mse_b = ((a - b) ** 2).reshape(c, -1).mean(axis=1)
    mean_b = b.reshape(c, -1).mean(axis=1)
    zero = np.flatnonzero(mean_b == 0)
    if zero.size:
        raise DegenerateInputError(f"band {zero[0]} of the reference has zero mean")
    return float(100.0 / ratio * np.sqrt(np.mean(mse_b / mean_b**2)))


def rsnr(x, x_ref) -> float:
    """Reconstruction SNR in dB, ``10 log10(|x_ref|^2 / |x_ref - x|^2)``."""
    a, b = _pair(x, x_ref)
    err = np.sum((b - a) ** 2)
    if err == 0:
        return math.inf
    return float(10.0 * np.log10(np.sum(b * b) / err))


def mae_per_band(x, x_ref) -> np.ndarray:
    a, b = _pair(x, x_ref)
    return np.abs(a - b).reshape(a.shape[0], -1).mean(axis=1)


def mae_map(x, x_ref) -> np.ndarray:
    """Per-pixel absolute error averaged over bands, ``[H, W]``."""
    a, b = _pair(x, x_ref)
    return np.abs(a - b).mean(axis=0)


def _json_float(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


@dataclass
class MetricsReport:
    cc: float
    sam_degrees: float
    rmse: float
    ergas: float
    psnr_db: float
    mae_per_band: np.ndarray
    scale_ratio: int = 4
    config_hash: str = ""
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def compute(cls, x, x_ref, ratio: int = 4, **kwargs) -> "MetricsReport":
        return cls(
            cc=cc(x, x_ref),
            sam_degrees=sam(x, x_ref),
            rmse=rmse(x, x_ref),
            ergas=ergas(x, x_ref, ratio),
            psnr_db=psnr(x, x_ref),
            mae_per_band=mae_per_band(x, x_ref),
            scale_ratio=ratio,
            **kwargs,
        )

    @classmethod
    def average(cls, reports: list["MetricsReport"], **kwargs) -> "MetricsReport":
        if not reports:
            raise ValueError("cannot average an empty list of reports")
        return cls(
            cc=float(np.mean([r.cc for r in reports])),
            sam_degrees=float(np.mean([r.sam_degrees for r in reports])),
            rmse=float(np.mean([r.rmse for r in reports])),
            ergas=float(np.mean([r.ergas for r in reports])),
            psnr_db=float(np.mean([r.psnr_db for r in reports])),
            mae_per_band=np.mean([r.mae_per_band for r in reports], axis=0),
            scale_ratio=reports[0].scale_ratio,
            **kwargs,
        )

    def to_dict(self) -> dict:
        out = {
            "cc": self.cc,
            "sam": self.sam_degrees,
            "rmse": self.rmse,
            "ergas": self.ergas,
            "psnr": _json_float(self.psnr_db),
            "mae_per_band": [float(v) for v in self.mae_per_band],
            "scale_ratio": self.scale_ratio,
            "config_hash": self.config_hash,
            "seed": self.seed,
        }
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        known = {"cc", "sam", "rmse", "ergas", "psnr", "mae_per_band", "scale_ratio", "config_hash", "seed"}
        return cls(
            cc=d["cc"], sam_degrees=d["sam"], rmse=d["rmse"], ergas=d["ergas"],
            psnr_db=float(d["psnr"]), mae_per_band=np.asarray(d["mae_per_band"]),
            scale_ratio=d.get("scale_ratio", 4), config_hash=d.get("config_hash", ""),
            seed=d.get("seed"), extra={k: v for k, v in d.items() if k not in known},
        )

"""Forecast error, energy spectra, conservation error and equivariance diagnostics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .groups import Field, GroupElement, act_on_array

LOG_FLOOR = 1e-12
CSV_COLUMNS = ("metric", "split", "transform", "step", "value", "seed")


def _stack(frames) -> np.ndarray:
    if isinstance(frames, Field):
        return frames.data[None]
    if isinstance(frames, np.ndarray):
        return np.asarray(frames, dtype=np.float64)
    return np.stack([f.data if isinstance(f, Field) else np.asarray(f, dtype=np.float64) for f in frames])


def _is_vector(frames) -> bool:
    if isinstance(frames, Field):
        return frames.channel_rep == "vector2"
    if isinstance(frames, (list, tuple)) and frames and isinstance(frames[0], Field):
        return frames[0].channel_rep == "vector2"
    return False


def rmse(pred, truth) -> float:
    """Root mean squared error over every pixel, channel and frame."""
    p, t = _stack(pred), _stack(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass
class SpectrumResult:
    k_bins: np.ndarray
    energy: np.ndarray
    log_energy: np.ndarray


def radial_bins(n: int, m: int | None = None) -> np.ndarray:
    """Integer |k| (rounded) for each entry of an n x m DFT."""
    m = n if m is None else m
    ky = np.fft.fftfreq(n) * n
    kx = np.fft.fftfreq(m) * m
    return np.rint(np.hypot(ky[:, None], kx[None, :])).astype(int)


def energy_spectrum(frames, dft: Callable[[np.ndarray], np.ndarray] | None = None) -> SpectrumResult:
    """Radially binned energy of the fluctuations about the per-pixel time mean.

    ``frames`` is ``[T, C, H, W]`` (or a list of Fields). Each bin holds
    ``sum |F[u']|^2 / 2`` over its wavenumbers and channels, averaged over
    frames and normalised so that the bins sum to the mean fluctuation
    energy ``mean(u'^2 + v'^2) / 2``. Bins run from 0 to the largest
    rounded |k| so that no mode is dropped.
    """
    a = _stack(frames)
    if a.ndim != 4:
        raise ValueError(f"expected [T,C,H,W] frames, got {a.shape}")
    if a.shape[0] < 2:
        raise ValueError("energy spectrum needs at least two frames for the time mean")
    t, c, h, w = a.shape
    fluct = a - a.mean(axis=0, keepdims=True)
    spec = (dft or (lambda z: np.fft.fft2(z, axes=(-2, -1))))(fluct)
    power = (np.abs(spec) ** 2).sum(axis=1).mean(axis=0) / (2.0 * (h * w) ** 2)
    bins = radial_bins(h, w)
    energy = np.bincount(bins.ravel(), weights=power.ravel(), minlength=bins.max() + 1)
    return SpectrumResult(np.arange(energy.size), energy, np.log(energy + LOG_FLOOR))


def direct_dft2(z: np.ndarray) -> np.ndarray:
    """O(N^4) 2D DFT over the two trailing axes (reference implementation)."""
    h, w = z.shape[-2:]
    fy = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fx = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    return np.einsum("ky,...yx,lx->...kl", fy, z, fx)


def ese(pred, truth) -> float:
    """RMSE between log energy spectra (with a 1e-12 floor inside the log)."""
    ep, et = energy_spectrum(pred), energy_spectrum(truth)
    if ep.energy.shape != et.energy.shape:
        raise ValueError("spectra have different bin counts")
    return float(np.sqrt(np.mean((ep.log_energy - et.log_energy) ** 2)))


def thermal_energy_loss(pred, truth) -> float:
    """Mean over frames of ``|sum(pred_t) - sum(truth_t)|`` for scalar fields."""
    if _is_vector(pred) or _is_vector(truth):
        raise ValueError("thermal energy loss is defined for scalar fields")
    p, t = _stack(pred), _stack(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if p.shape[-3] != 1:
        raise ValueError("thermal energy loss is defined for single-channel scalar fields")
    return float(np.mean(np.abs(p.sum(axis=(-3, -2, -1)) - t.sum(axis=(-3, -2, -1)))))


def component_sum_loss(pred, truth) -> float:
    """Per-channel analogue of :func:`thermal_energy_loss`: mean ``|sum pred_c - sum truth_c|``."""
    p, t = _stack(pred), _stack(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return float(np.mean(np.abs(p.sum(axis=(-2, -1)) - t.sum(axis=(-2, -1)))))


# ---------------------------------------------------------------------------
# equivariance
# ---------------------------------------------------------------------------

def _transform(g: GroupElement, a: np.ndarray, channel_rep: str) -> np.ndarray:
    if g.kind == "uniform_motion" and channel_rep != "vector2":
        raise ValueError("uniform motion is not applicable to scalar fields")
    return act_on_array(g, a, channel_rep)


def equivariance_error(f: Callable[[np.ndarray], np.ndarray], g: GroupElement, x: np.ndarray,
                       channel_rep: str = "scalar") -> float:
    """RMSE of ``g f(x) - f(g x)``; the same action is used on inputs and outputs."""
    gx = _transform(g, x, channel_rep)
    return rmse(_transform(g, f(x), channel_rep), f(gx))


def operator_norm(g: GroupElement) -> float | None:
    """RMSE Lipschitz constant of the action, or None when no exact value is known."""
    if g.kind in ("uniform_motion", "rotate", "translate"):
        if g.kind == "rotate" and g.quarter_turns() is None:
            return None
        return 1.0
    if g.kind == "magnitude":
        return float(g.value[0])
    return None


def check_tte_bound(f: Callable[[np.ndarray], np.ndarray], g: GroupElement, x: np.ndarray, y: np.ndarray,
                    channel_rep: str = "scalar", slack: float = 1e-9) -> dict:
    """Transformed test error against its triangle-inequality bound.

    ``tte = |f(gx) - gy|``, ``te = |f(x) - y|``, ``ee = |g f(x) - f(gx)|``.
    Splitting ``f(gx) - gy`` through ``g f(x)`` gives
    ``tte <= ee + |g| te`` (``holds``). The variant ``tte <= te + |g| ee``
    (``holds_swapped``) agrees with it when ``|g| = 1`` and may fail
    otherwise. Scale transforms have no exact norm and are reported as not
    applicable.
    """
    norm = operator_norm(g)
    fx = f(x)
    gx = _transform(g, x, channel_rep)
    fgx = f(gx)
    gy = _transform(g, y, channel_rep)
    tte = rmse(fgx, gy)
    te = rmse(fx, y)
    ee = rmse(_transform(g, fx, channel_rep), fgx)
    out = {"tte": tte, "te": te, "ee": ee, "norm_T": norm, "applicable": norm is not None}
    if norm is None:
        out.update(holds=None, holds_swapped=None, bound=None, bound_swapped=None)
        return out
    bound = ee + norm * te
    swapped = te + norm * ee
    out.update(bound=bound, bound_swapped=swapped,
               holds=bool(tte <= bound + slack), holds_swapped=bool(tte <= swapped + slack))
    return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def format_value(v: float) -> str:
    return repr(float(v))


def metrics_csv(rows: Iterable[dict]) -> str:
    """CSV text with columns ``metric, split, transform, step, value, seed``."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_COLUMNS)
    for r in rows:
        wr.writerow([r["metric"], r["split"], r["transform"], r["step"], format_value(r["value"]), r["seed"]])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        r["value"] = float(r["value"])
    return rows

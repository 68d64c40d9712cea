"""Heat-diffusion trajectories, rolling-window datasets and transformed test sets."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .groups import Field, GroupElement, act_on_array, rescale_grid

BOUNDARIES = ("periodic", "insulated")
FAMILIES = ("bumps", "disks", "noise")
TRANSFORMS = ("UM", "Mag", "Rot", "Scale")
STABILITY_LIMIT = 0.25
DATASET_MAGIC = b"EQDY"
DATASET_VERSION = 1


@dataclass
class Trajectory:
    frames: np.ndarray  # [T, C, H, W]
    alpha: float
    dt: float
    dx: float
    boundary: str = "periodic"
    channel_rep: str = "scalar"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be [T,C,H,W], got {self.frames.shape}")

    def field(self, t: int) -> Field:
        return Field(self.frames[t], self.channel_rep, self.dx, self.dt)


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

def courant_number(alpha: float, dt: float, dx: float) -> float:
    return alpha * dt / (dx * dx)


def laplacian(h: np.ndarray, boundary: str = "periodic") -> np.ndarray:
    """Five-point Laplacian (without the 1/dx^2 factor) over the two trailing axes."""
    if boundary == "periodic":
        return (np.roll(h, 1, -1) + np.roll(h, -1, -1) + np.roll(h, 1, -2) + np.roll(h, -1, -2) - 4.0 * h)
    if boundary == "insulated":
        p = np.pad(h, [(0, 0)] * (h.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
        return p[..., 1:-1, :-2] + p[..., 1:-1, 2:] + p[..., :-2, 1:-1] + p[..., 2:, 1:-1] - 4.0 * h
    raise ValueError(f"boundary must be one of {BOUNDARIES}")


def simulate_heat(h0, alpha: float, dt: float, dx: float, steps: int, boundary: str = "periodic",
                  save_every: int = 1) -> Trajectory:
    """Forward-time centred-space integration of ``dH/dt = alpha * Laplacian(H)``.

    ``steps`` solver steps are taken; every ``save_every``-th state is kept,
    starting with ``h0``. Rejects Courant numbers above 1/4.
    """
    data = h0.data if isinstance(h0, Field) else np.asarray(h0, dtype=np.float64)
    rep = h0.channel_rep if isinstance(h0, Field) else "scalar"
    if data.ndim == 2:
        data = data[None]
    r = courant_number(alpha, dt, dx)
    if r > STABILITY_LIMIT:
        raise ValueError(f"unstable step: alpha*dt/dx^2 = {r:.6g} exceeds {STABILITY_LIMIT}")
    if steps < 0 or save_every < 1:
        raise ValueError("steps must be >= 0 and save_every >= 1")
    h = np.array(data, dtype=np.float64)
    frames = [h.copy()]
    for k in range(1, steps + 1):
        h = h + r * laplacian(h, boundary)
        if k % save_every == 0:
            frames.append(h.copy())
    return Trajectory(np.stack(frames), alpha, dt * save_every, dx, boundary, rep)


def periodic_gaussian(n: int, dx: float, center: Sequence[float], var: float, images: int = 3) -> np.ndarray:
    """Sum of periodic images of ``exp(-|x - c|^2 / (2 var))`` on an n x n grid of spacing dx."""
    length = n * dx
    coords = np.arange(n) * dx
    out = np.zeros((n, n))
    for iy in range(-images, images + 1):
        dy = coords[:, None] - center[1] - iy * length
        for ix in range(-images, images + 1):
            dxx = coords[None, :] - center[0] - ix * length
            out += np.exp(-(dxx ** 2 + dy ** 2) / (2.0 * var))
    return out


def heat_kernel_solution(n: int, dx: float, center, var0: float, alpha: float, t: float) -> np.ndarray:
    """Exact periodic solution started from a unit-peak Gaussian of variance ``var0``."""
    var = var0 + 2.0 * alpha * t
    return (var0 / var) * periodic_gaussian(n, dx, center, var)


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    n_traj: int = 200
    grid: int = 32
    frames: int = 60
    alpha_range: tuple = (0.5, 1.5)
    families: tuple = FAMILIES
    dx: float = 1.0
    dt: float = 0.5
    substeps: int = 4
    boundary: str = "periodic"
    kind: str = "heat"  # heat | velocity
    amplitude_range: tuple = (0.5, 1.0)
    width_range: tuple = (2.0, 4.0)
    anisotropy: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.n_traj < 1:
            raise ValueError("n_traj must be >= 1")
        if self.frames < 2:
            raise ValueError("trajectories need at least two frames")
        if self.kind not in ("heat", "velocity"):
            raise ValueError("kind must be 'heat' or 'velocity'")
        bad = set(self.families) - set(FAMILIES)
        if bad:
            raise ValueError(f"unknown initial-condition families {sorted(bad)}")
        object.__setattr__(self, "alpha_range", tuple(float(a) for a in self.alpha_range))
        object.__setattr__(self, "families", tuple(self.families))
        object.__setattr__(self, "amplitude_range", tuple(float(a) for a in self.amplitude_range))
        object.__setattr__(self, "width_range", tuple(float(a) for a in self.width_range))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


def _grid_xy(n: int):
    c = np.arange(n, dtype=np.float64)
    return np.meshgrid(c, c, indexing="xy")  # x along columns, y along rows


def _periodic_offsets(n: int, c: float, coords: np.ndarray) -> np.ndarray:
    d = coords - c
    return (d + n / 2.0) % n - n / 2.0


def initial_condition(family: str, n: int, rng: np.random.Generator, cfg: CorpusConfig) -> np.ndarray:
    """One scalar field from ``family``.

    Shapes are stretched along x by ``cfg.anisotropy`` so rotated samples
    are out of distribution; amplitudes and widths stay inside the
    configured ranges so magnified and rescaled samples are too.
    """
    x, y = _grid_xy(n)
    lo, hi = cfg.width_range
    a_lo, a_hi = cfg.amplitude_range
    out = np.zeros((n, n))
    if family == "bumps":
        for _ in range(rng.integers(1, 4)):
            cx, cy = rng.uniform(0, n, 2)
            s = rng.uniform(lo, hi)
            dx = _periodic_offsets(n, cx, x) / cfg.anisotropy
            dy = _periodic_offsets(n, cy, y)
            out += rng.uniform(a_lo, a_hi) * np.exp(-(dx ** 2 + dy ** 2) / (2 * s * s))
    elif family == "disks":
        cx, cy = rng.uniform(0, n, 2)
        rad = rng.uniform(1.5 * lo, 1.5 * hi)
        dx = _periodic_offsets(n, cx, x) / cfg.anisotropy
        dy = _periodic_offsets(n, cy, y)
        # soft edge keeps the field resolvable on the grid
        out = rng.uniform(a_lo, a_hi) / (1.0 + np.exp((np.sqrt(dx ** 2 + dy ** 2) - rad) / 0.75))
    elif family == "noise":
        k = np.fft.fftfreq(n) * n
        kx, ky = np.meshgrid(k, k, indexing="xy")
        s = rng.uniform(lo, hi)
        envelope = np.exp(-0.5 * ((kx * cfg.anisotropy) ** 2 + ky ** 2) * (2 * np.pi * s / n) ** 2)
        spec = (rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))) * envelope
        f = np.real(np.fft.ifft2(spec))
        f -= f.min()
        out = rng.uniform(a_lo, a_hi) * f / max(f.max(), 1e-12)
    else:
        raise ValueError(f"unknown family {family!r}")
    return out


def streamfunction_velocity(psi: np.ndarray) -> np.ndarray:
    """Divergence-free ``(u, v) = (d psi/dy, -d psi/dx)`` by periodic central differences."""
    u = 0.5 * (np.roll(psi, -1, 0) - np.roll(psi, 1, 0))
    v = -0.5 * (np.roll(psi, -1, 1) - np.roll(psi, 1, 1))
    return np.stack([u, v])


def _one_trajectory(cfg: CorpusConfig, i: int) -> Trajectory:
    rng = np.random.default_rng([cfg.seed, i])
    family = cfg.families[int(rng.integers(len(cfg.families)))]
    alpha = float(rng.uniform(*cfg.alpha_range))
    h0 = initial_condition(family, cfg.grid, rng, cfg)
    sub_dt = cfg.dt / cfg.substeps
    steps = (cfg.frames - 1) * cfg.substeps
    if cfg.kind == "heat":
        return simulate_heat(h0, alpha, sub_dt, cfg.dx, steps, cfg.boundary, cfg.substeps)
    # velocity: streamfunction from the scalar family, scaled to unit-order speeds
    vel = streamfunction_velocity(h0 * cfg.width_range[1])
    traj = simulate_heat(Field(vel, "vector2", cfg.dx, sub_dt), alpha, sub_dt, cfg.dx, steps,
                         cfg.boundary, cfg.substeps)
    return traj


def generate_corpus(cfg: CorpusConfig, threads: int = 1) -> list[Trajectory]:
    """Reproducible list of trajectories; trajectory i depends only on ``(seed, i)``."""
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda i: _one_trajectory(cfg, i), range(cfg.n_traj)))
    return [_one_trajectory(cfg, i) for i in range(cfg.n_traj)]


def corpus_hash(trajs: Sequence[Trajectory]) -> str:
    h = hashlib.sha256()
    for t in trajs:
        h.update(np.ascontiguousarray(t.frames, dtype="<f8").tobytes())
        h.update(struct.pack("<ddd", t.alpha, t.dt, t.dx))
    return h.hexdigest()


# ---------------------------------------------------------------------------
# windows and splits
# ---------------------------------------------------------------------------

def rolling_windows(n_frames: int, l: int, horizon: int, stride: int = 1) -> list[int]:
    """Start indices of windows of ``l`` inputs followed by ``horizon`` targets."""
    if l < 1 or horizon < 1 or stride < 1:
        raise ValueError("l, horizon and stride must be positive")
    if l + horizon > n_frames:
        raise ValueError(f"trajectory of {n_frames} frames is too short for l={l} + horizon={horizon}")
    return list(range(0, n_frames - l - horizon + 1, stride))


@dataclass
class Dataset:
    """Windows ``x [N, l*C, H, W]`` and targets ``y [N, horizon, C, H, W]``."""

    x: np.ndarray
    y: np.ndarray
    channel_rep: str
    origin: np.ndarray  # [N, 2] (trajectory index, start frame)
    sources: list  # frame arrays the windows were cut from
    dx: float = 1.0
    dt: float = 1.0
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.x)

    @property
    def input_frames(self) -> int:
        return self.x.shape[1] // self.y.shape[2]

    def subset(self, idx) -> "Dataset":
        return replace(self, x=self.x[idx], y=self.y[idx], origin=self.origin[idx])


def _cut(frames: np.ndarray, starts: Sequence[int], l: int, horizon: int):
    t, c, h, w = frames.shape
    xs = np.stack([frames[s:s + l].reshape(l * c, h, w) for s in starts])
    ys = np.stack([frames[s + l:s + l + horizon] for s in starts])
    return xs, ys


def split_ranges(total: int, fractions=(0.6, 0.2, 0.2)) -> dict:
    """Contiguous ``[start, end)`` ranges of a global time axis."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    a = int(round(total * fractions[0]))
    b = int(round(total * (fractions[0] + fractions[1])))
    return {"train": (0, a), "val": (a, b), "test": (b, total)}


def make_datasets(trajs: Sequence[Trajectory], l: int, horizon: int, stride: int = 1,
                  fractions=(0.6, 0.2, 0.2), provenance: dict | None = None) -> dict:
    """Train/val/test datasets split contiguously over the concatenated time axis.

    Trajectories are laid end to end; the split points cut that global
    axis 60/20/20 and every segment is windowed on its own, so no window
    crosses a trajectory or split boundary.
    """
    lengths = [len(t.frames) for t in trajs]
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    ranges = split_ranges(int(offsets[-1]), fractions)
    rep = trajs[0].channel_rep
    out = {}
    for name, (lo, hi) in ranges.items():
        xs, ys, origin, sources = [], [], [], []
        for i, t in enumerate(trajs):
            a, b = max(lo, offsets[i]) - offsets[i], min(hi, offsets[i + 1]) - offsets[i]
            if b - a < l + horizon:
                continue
            seg = t.frames[a:b]
            starts = rolling_windows(len(seg), l, horizon, stride)
            x, y = _cut(seg, starts, l, horizon)
            xs.append(x)
            ys.append(y)
            origin.extend((len(sources), s) for s in starts)
            sources.append(seg)
        c, h, w = trajs[0].frames.shape[1:]
        out[name] = Dataset(
            x=np.concatenate(xs) if xs else np.zeros((0, l * c, h, w)),
            y=np.concatenate(ys) if ys else np.zeros((0, horizon, c, h, w)),
            channel_rep=rep, origin=np.array(origin, dtype=np.int64).reshape(-1, 2), sources=sources,
            dx=trajs[0].dx, dt=trajs[0].dt,
            provenance={**(provenance or {}), "split": name, "range": [int(lo), int(hi)]})
    return out


# ---------------------------------------------------------------------------
# transformed test sets
# ---------------------------------------------------------------------------

def scale_frames(seg: np.ndarray, start: int, l: int, horizon: int, lam: float, channel_rep: str) -> np.ndarray:
    """Window frames of the rescaled trajectory ``lam^m w(lam x, lam^2 t)``.

    Time is anchored at the newest input frame; frame j is sampled at
    ``anchor + lam^2 (j - l + 1)`` by linear interpolation, clamped to the
    available frames.
    """
    anchor = start + l - 1
    last = len(seg) - 1
    out = []
    for j in range(l + horizon):
        t = min(max(anchor + lam * lam * (j - l + 1), 0.0), last)
        i0 = int(np.floor(t))
        f = t - i0
        fr = seg[i0] if f == 0 else (1 - f) * seg[i0] + f * seg[min(i0 + 1, last)]
        out.append(fr)
    frames = rescale_grid(np.stack(out), lam)
    return frames * lam if channel_rep == "vector2" else frames


def make_transformed_testset(test: Dataset, kind: str, seed: int, value=None,
                             rotation_step: float = np.pi / 2) -> Dataset:
    """Apply one random transform per window to inputs and targets alike.

    UM adds ``c ~ U(-1, 1)^2`` (vector data only); Mag multiplies by
    ``lam ~ U(0, 2)``; Rot turns by a random multiple of ``rotation_step``;
    Scale applies ``lam ~ U(1/5, 2)`` to space and time. ``value`` fixes the
    parameter for every window.
    """
    if kind not in TRANSFORMS:
        raise ValueError(f"kind must be one of {TRANSFORMS}")
    if kind == "UM" and test.channel_rep != "vector2":
        raise ValueError("uniform motion applies only to vector2 datasets")
    rng = np.random.default_rng([seed, TRANSFORMS.index(kind)])
    n = len(test)
    c = test.y.shape[2]
    l = test.x.shape[1] // c
    horizon = test.y.shape[1]
    h, w = test.x.shape[-2:]
    xs, ys, params = np.empty_like(test.x), np.empty_like(test.y), []
    turns = int(round(2 * np.pi / rotation_step))
    for i in range(n):
        frames = np.concatenate([test.x[i].reshape(l, c, h, w), test.y[i]])
        if kind == "UM":
            cv = tuple(rng.uniform(-1, 1, 2)) if value is None else tuple(value)
            g = GroupElement.uniform_motion(*cv)
            params.append(list(cv))
        elif kind == "Mag":
            lam = rng.uniform(0, 2) if value is None else float(value)
            g = GroupElement.magnitude(max(lam, 1e-12))
            params.append(lam)
        elif kind == "Rot":
            j = int(rng.integers(turns)) if value is None else int(value)
            g = GroupElement.rotate(j, turns)
            params.append(j)
        else:
            lam = rng.uniform(0.2, 2.0) if value is None else float(value)
            ti, start = test.origin[i]
            frames = scale_frames(test.sources[ti], int(start), l, horizon, lam, test.channel_rep)
            params.append(lam)
            g = None
        if g is not None:
            frames = act_on_array(g, frames, test.channel_rep)
        xs[i] = frames[:l].reshape(l * c, h, w)
        ys[i] = frames[l:]
    prov = {**test.provenance, "transform": kind, "transform_seed": seed, "parameters": params}
    return replace(test, x=xs, y=ys, provenance=prov)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def write_trajectory(path, traj: Trajectory, config_hash: str) -> None:
    """``EQDY | u32 version | u32 C,H,W,T | f64 dx,dt,alpha | f64 frames | 64-char hex hash``."""
    if len(config_hash) != 64:
        raise ValueError("config hash must be 64 hex characters")
    t, c, h, w = traj.frames.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIIII", DATASET_VERSION, c, h, w, t))
        fh.write(struct.pack("<ddd", traj.dx, traj.dt, traj.alpha))
        # row-major over [T, C, H, W]
        fh.write(np.ascontiguousarray(traj.frames, dtype="<f8").tobytes())
        fh.write(config_hash.encode("ascii"))


def read_trajectory(path, channel_rep: str | None = None, boundary: str = "periodic") -> tuple[Trajectory, str]:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise ValueError(f"{path} is not an EQDY file")
    version, c, h, w, t = struct.unpack("<IIIII", raw[4:24])
    if version != DATASET_VERSION:
        raise ValueError(f"unsupported EQDY version {version}")
    dx, dt, alpha = struct.unpack("<ddd", raw[24:48])
    n = t * c * h * w
    body = raw[48:48 + 8 * n]
    if len(body) != 8 * n or len(raw) != 48 + 8 * n + 64:
        raise ValueError(f"{path} is truncated or has trailing data")
    frames = np.frombuffer(body, dtype="<f8").reshape(t, c, h, w).astype(np.float64)
    rep = channel_rep or ("vector2" if c % 2 == 0 and c > 1 else "scalar")
    return Trajectory(frames, alpha, dt, dx, boundary, rep), raw[-64:].decode("ascii")

"""Symmetry group elements, channel representations and actions on gridded fields.

Grid convention: arrays are ``[..., C, H, W]`` with ``x`` along columns and
``y`` along rows. Vector fields store ``(u, v)`` as interleaved channel
pairs ``(2i, 2i+1)``, ``u`` along ``x`` and ``v`` along ``y``. A quarter turn
maps pixel ``(r, c)`` to ``(c, H-1-r)`` and rotates vectors by ``rho_1(pi/2)``,
so gradients of rotated scalar fields are the rotated gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

CHANNEL_REPS = ("scalar", "vector2")
GROUP_KINDS = ("translate", "uniform_motion", "magnitude", "rotate", "scale")


# ---------------------------------------------------------------------------
# fields and group elements
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Field:
    """A d-channel function sampled on a 2D grid."""

    data: np.ndarray
    channel_rep: str = "scalar"
    dx: float = 1.0
    dt: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"Field data must be [C,H,W], got shape {data.shape}")
        if self.channel_rep not in CHANNEL_REPS:
            raise ValueError(f"channel_rep must be one of {CHANNEL_REPS}")
        if self.channel_rep == "vector2" and data.shape[0] % 2:
            raise ValueError("vector2 fields need an even channel count")
        if not (self.dx > 0 and self.dt > 0):
            raise ValueError("dx and dt must be positive")
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data: np.ndarray, **kw) -> "Field":
        return replace(self, data=np.asarray(data, dtype=np.float64), **kw)


@dataclass(frozen=True)
class GroupElement:
    kind: str
    value: tuple = field(default=())
    order: int = 4

    def __post_init__(self):
        if self.kind not in GROUP_KINDS:
            raise ValueError(f"unknown group kind {self.kind!r}")
        if self.kind in ("magnitude", "scale") and not self.value[0] > 0:
            raise ValueError(f"{self.kind} factor must be strictly positive, got {self.value[0]}")
        if self.kind == "rotate":
            if self.order < 1:
                raise ValueError("rotation group order must be >= 1")
            object.__setattr__(self, "value", (int(self.value[0]) % self.order,))
        if self.kind == "translate":
            object.__setattr__(self, "value", tuple(int(v) for v in self.value))

    # constructors --------------------------------------------------------
    @classmethod
    def translate(cls, vx: int, vy: int) -> "GroupElement":
        return cls("translate", (vx, vy))

    @classmethod
    def uniform_motion(cls, cu: float, cv: float) -> "GroupElement":
        return cls("uniform_motion", (float(cu), float(cv)))

    @classmethod
    def magnitude(cls, lam: float) -> "GroupElement":
        return cls("magnitude", (float(lam),))

    @classmethod
    def rotate(cls, j: int, n: int = 4) -> "GroupElement":
        return cls("rotate", (j,), order=n)

    @classmethod
    def scale(cls, lam: float) -> "GroupElement":
        return cls("scale", (float(lam),))

    @classmethod
    def identity(cls, kind: str, n: int = 4) -> "GroupElement":
        return {
            "translate": lambda: cls.translate(0, 0),
            "uniform_motion": lambda: cls.uniform_motion(0.0, 0.0),
            "magnitude": lambda: cls.magnitude(1.0),
            "rotate": lambda: cls.rotate(0, n),
            "scale": lambda: cls.scale(1.0),
        }[kind]()

    # group law -----------------------------------------------------------
    def compose(self, other: "GroupElement") -> "GroupElement":
        """``self o other`` (apply ``other`` first)."""
        if self.kind != other.kind:
            raise ValueError("can only compose elements of the same kind")
        if self.kind in ("translate", "uniform_motion"):
            return GroupElement(self.kind, tuple(a + b for a, b in zip(self.value, other.value)))
        if self.kind in ("magnitude", "scale"):
            return GroupElement(self.kind, (self.value[0] * other.value[0],))
        if self.order != other.order:
            raise ValueError("rotation orders differ")
        return GroupElement.rotate(self.value[0] + other.value[0], self.order)

    def inverse(self) -> "GroupElement":
        if self.kind in ("translate", "uniform_motion"):
            return GroupElement(self.kind, tuple(-a for a in self.value))
        if self.kind in ("magnitude", "scale"):
            return GroupElement(self.kind, (1.0 / self.value[0],))
        return GroupElement.rotate(-self.value[0], self.order)

    @property
    def angle(self) -> float:
        if self.kind != "rotate":
            raise ValueError("angle is only defined for rotations")
        return 2.0 * np.pi * self.value[0] / self.order

    def quarter_turns(self) -> int | None:
        """Number of exact 90 degree turns, or None if the angle is off-grid."""
        q, r = divmod(4 * self.value[0], self.order)
        return q % 4 if r == 0 else None


# ---------------------------------------------------------------------------
# representations
# ---------------------------------------------------------------------------

def irrep_matrix(freq: int, theta: float, order: int | None = None) -> np.ndarray:
    """Frequency-``freq`` rotation matrix; 1x1 for the trivial irrep.

    With ``order`` even and ``freq == order/2`` the irrep of C_order is the
    one-dimensional sign representation.
    """
    if freq == 0:
        return np.ones((1, 1))
    if order is not None and order % 2 == 0 and freq % order == order // 2:
        return np.array([[np.cos(freq * theta)]]).round(12) + 0.0
    c, s = np.cos(freq * theta), np.sin(freq * theta)
    m = np.array([[c, -s], [s, c]])
    # exact zeros/ones at grid angles keep index-map tests bit-exact
    m[np.abs(m) < 1e-15] = 0.0
    return np.round(m, 15) if np.all(np.isclose(m, np.round(m), atol=1e-15)) else m


def regular_rep_matrix(j: int, n: int) -> np.ndarray:
    """Permutation matrix of rotation ``j`` on R[C_n]: basis e_h -> e_{j+h}."""
    p = np.zeros((n, n))
    p[(np.arange(n) + j) % n, np.arange(n)] = 1.0
    return p


BLOCK_KINDS = ("trivial", "irrep", "regular")


@dataclass(frozen=True)
class Rep:
    """Direct sum of C_n representations acting on a channel axis.

    ``blocks`` is a tuple of ``("trivial",)``, ``("irrep", k)`` or
    ``("regular",)`` entries laid out contiguously along the channel axis.
    """

    blocks: tuple
    n: int = 4

    def __post_init__(self):
        for b in self.blocks:
            if b[0] not in BLOCK_KINDS:
                raise ValueError(f"unknown representation block {b!r}")

    @classmethod
    def trivial(cls, m: int, n: int = 4) -> "Rep":
        return cls((("trivial",),) * m, n)

    @classmethod
    def vectors(cls, m: int, n: int = 4) -> "Rep":
        return cls((("irrep", 1),) * m, n)

    @classmethod
    def regular(cls, m: int, n: int = 4) -> "Rep":
        return cls((("regular",),) * m, n)

    @classmethod
    def for_channels(cls, channel_rep: str, channels: int, n: int = 4) -> "Rep":
        if channel_rep == "scalar":
            return cls.trivial(channels, n)
        if channels % 2:
            raise ValueError("vector2 representation needs an even channel count")
        return cls.vectors(channels // 2, n)

    def block_dim(self, b) -> int:
        if b[0] == "trivial":
            return 1
        if b[0] == "regular":
            return self.n
        k = b[1] % self.n
        if k == 0 or (self.n % 2 == 0 and k == self.n // 2) or self.n <= 2:
            return 1 if k == 0 or self.n <= 2 or k == self.n // 2 else 2
        return 2

    @property
    def dim(self) -> int:
        return sum(self.block_dim(b) for b in self.blocks)

    @property
    def is_pointwise_safe(self) -> bool:
        """True when every group element acts by a permutation (relu commutes)."""
        return all(b[0] in ("trivial", "regular") for b in self.blocks)

    def matrix(self, j: int) -> np.ndarray:
        return _rep_matrix(self, int(j) % self.n)

    def __add__(self, other: "Rep") -> "Rep":
        if self.n != other.n:
            raise ValueError("cannot sum representations of different groups")
        return Rep(self.blocks + other.blocks, self.n)


@lru_cache(maxsize=None)
def _rep_matrix(rep: Rep, j: int) -> np.ndarray:
    theta = 2.0 * np.pi * j / rep.n
    mats = []
    for b in rep.blocks:
        if b[0] == "trivial":
            mats.append(np.ones((1, 1)))
        elif b[0] == "regular":
            mats.append(regular_rep_matrix(j, rep.n))
        else:
            k = b[1]
            if rep.block_dim(b) == 1:
                mats.append(np.array([[np.round(np.cos(k * theta))]]))
            else:
                mats.append(irrep_matrix(k, theta))
    d = sum(m.shape[0] for m in mats)
    out = np.zeros((d, d))
    i = 0
    for m in mats:
        k = m.shape[0]
        out[i:i + k, i:i + k] = m
        i += k
    out.setflags(write=False)
    return out


def regular_rep_decomposition_check(n: int, atol: float = 1e-12) -> bool:
    """Character check that R[C_n] = rho_0 + rho_1 + ... + rho_{floor(n/2)}.

    For even ``n`` the top irrep ``rho_{n/2}`` is the one-dimensional sign
    character; every other ``rho_k`` (k >= 1) is two-dimensional.
    """
    if n < 1:
        raise ValueError("group order must be >= 1")
    dims = 0
    for j in range(n):
        theta = 2.0 * np.pi * j / n
        lhs = np.trace(regular_rep_matrix(j, n))
        rhs = 0.0
        for k in range(n // 2 + 1):
            if k == 0:
                rhs += 1.0
                dims += (j == 0)
            elif 2 * k == n:
                rhs += np.cos(k * theta)
                dims += (j == 0)
            else:
                rhs += 2.0 * np.cos(k * theta)
                dims += 2 * (j == 0)
        if abs(lhs - rhs) > atol:
            return False
    return dims == n


# ---------------------------------------------------------------------------
# spatial transforms on arrays
# ---------------------------------------------------------------------------

def rotate_grid(data: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Rotate the two trailing axes by quarter turns, ``(r, c) -> (c, H-1-r)`` per turn."""
    return np.ascontiguousarray(np.rot90(data, -int(quarter_turns) % 4, axes=(-2, -1)))


def rotate_grid_interp(data: np.ndarray, theta: float) -> np.ndarray:
    """Rotate the grid by an arbitrary angle with periodic bilinear sampling."""
    h, w = data.shape[-2:]
    if h != w:
        raise ValueError("rotation needs a square grid")
    c = (h - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    x, y = cc - c, rr - c
    ct, st = np.cos(theta), np.sin(theta)
    # source = R^{-1} p
    xs, ys = ct * x + st * y, -st * x + ct * y
    return _bilinear_periodic(data, ys + c, xs + c)


def _bilinear_periodic(data: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w = data.shape[-2:]
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    fr, fc = rows - r0, cols - c0
    out = 0.0
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            out = out + data[..., (r0 + dr) % h, (c0 + dc) % w] * (wr * wc)
    return out


def rotate_vectors(data: np.ndarray, theta: float) -> np.ndarray:
    """Apply rho_1(theta) to every interleaved (u, v) channel pair of ``[..., C, H, W]``."""
    m = irrep_matrix(1, theta)
    c = data.shape[-3]
    pairs = data.reshape(data.shape[:-3] + (c // 2, 2) + data.shape[-2:])
    out = np.einsum("ab,...bhw->...ahw", m, pairs)
    return out.reshape(data.shape)


def rotate_tensor(data: np.ndarray, j: int, rep: Rep) -> np.ndarray:
    """Act with rotation ``j`` of C_n on ``[..., C, H, W]`` carrying ``rep`` on channels."""
    g = GroupElement.rotate(j, rep.n)
    qt = g.quarter_turns()
    if qt is None:
        raise ValueError(f"rotation {j} of C_{rep.n} is not a grid-exact quarter turn")
    if data.shape[-3] != rep.dim:
        raise ValueError(f"channel count {data.shape[-3]} != representation dimension {rep.dim}")
    spatial = rotate_grid(data, qt)
    return np.einsum("ab,...bhw->...ahw", rep.matrix(g.value[0]), spatial)


def gaussian_blur_matrix(n: int, sigma: float) -> np.ndarray:
    """Periodic Gaussian blur as an n x n circulant matrix (identity for sigma=0)."""
    if sigma <= 0:
        return np.eye(n)
    d = np.arange(n)
    dist = np.minimum(d, n - d).astype(float)
    k = np.exp(-0.5 * (dist / sigma) ** 2)
    k /= k.sum()
    return np.stack([np.roll(k, i) for i in range(n)])


def antialias_sigma(lam: float) -> float:
    # extra blur so a unit-resolution grid sampled at spacing lam keeps sigma ~ 0.5*lam
    return 0.5 * np.sqrt(max(lam * lam - 1.0, 0.0))


@lru_cache(maxsize=256)
def _resample_matrix_cached(n: int, lam: float, antialias: bool) -> np.ndarray:
    c = (n - 1) / 2.0
    pos = c + lam * (np.arange(n) - c)
    i0 = np.floor(pos).astype(int)
    f = pos - i0
    a = np.zeros((n, n))
    np.add.at(a, (np.arange(n), i0 % n), 1.0 - f)
    np.add.at(a, (np.arange(n), (i0 + 1) % n), f)
    if antialias:
        a = a @ gaussian_blur_matrix(n, antialias_sigma(lam))
    a.setflags(write=False)
    return a


def resample_matrix(n: int, lam: float, antialias: bool = True) -> np.ndarray:
    """1D operator ``out[p] = blur(in)(c + lam (p - c))`` with periodic bilinear sampling."""
    return _resample_matrix_cached(int(n), float(lam), bool(antialias))


def rescale_grid(data: np.ndarray, lam: float, antialias: bool = True) -> np.ndarray:
    """Spatial part of the scaling action: ``w(x) -> w(lam x)`` about the grid centre."""
    h, w = data.shape[-2:]
    if lam == 1.0:
        return np.array(data, dtype=np.float64)
    ay, ax = resample_matrix(h, lam, antialias), resample_matrix(w, lam, antialias)
    return np.einsum("ij,...jk,lk->...il", ay, data, ax, optimize=True)


# ---------------------------------------------------------------------------
# actions on fields
# ---------------------------------------------------------------------------

def act_on_array(g: GroupElement, data: np.ndarray, channel_rep: str) -> np.ndarray:
    """Group action on raw ``[..., C, H, W]`` data (all frames transformed alike)."""
    data = np.asarray(data, dtype=np.float64)
    if g.kind == "translate":
        vx, vy = g.value
        return np.roll(data, (vy, vx), axis=(-2, -1))
    if g.kind == "uniform_motion":
        if channel_rep != "vector2":
            raise ValueError("uniform motion acts only on vector2 fields")
        shift = np.zeros(data.shape[-3])
        shift[0::2], shift[1::2] = g.value
        return data + shift[:, None, None]
    if g.kind == "magnitude":
        return data * g.value[0]
    if g.kind == "rotate":
        if data.shape[-1] != data.shape[-2]:
            raise ValueError("rotation needs a square grid")
        qt = g.quarter_turns()
        theta = g.angle
        spatial = rotate_grid(data, qt) if qt is not None else rotate_grid_interp(data, theta)
        if channel_rep == "vector2":
            spatial = rotate_vectors(spatial, theta)
        return spatial
    lam = g.value[0]
    out = rescale_grid(data, lam)
    return out * lam if channel_rep == "vector2" else out


def act_on_field(g: GroupElement, f: Field) -> Field:
    """Apply ``g`` to a field.

    Magnitude rescales the data and the discretisation constants
    (dx / lam, dt / lam^2). Scale resamples the grid spatially and, for
    vector fields, multiplies magnitudes by lam; the time part of the
    scaling law acts on trajectories (see ``dynamics.scale_frames``).
    """
    data = act_on_array(g, f.data, f.channel_rep)
    if g.kind == "magnitude":
        lam = g.value[0]
        return f.with_data(data, dx=f.dx / lam, dt=f.dt / lam**2)
    return f.with_data(data)


# ---------------------------------------------------------------------------
# steerable kernels
# ---------------------------------------------------------------------------

def _check_kernel_group(kernel: np.ndarray, rep_in: Rep, rep_out: Rep, n: int):
    if rep_in.n != n or rep_out.n != n:
        raise ValueError("representation group order does not match n")
    if n not in (1, 2, 4):
        raise ValueError(f"exact kernel rotation needs n in (1, 2, 4), got {n}")
    if kernel.shape[0] != rep_out.dim or kernel.shape[1] != rep_in.dim:
        raise ValueError(
            f"kernel channels {kernel.shape[:2]} do not match representation dims "
            f"({rep_out.dim}, {rep_in.dim})")
    if kernel.shape[-1] != kernel.shape[-2]:
        raise ValueError("steerable kernels must be spatially square")


def rotate_kernel(kernel: np.ndarray, j: int, rep_in: Rep, rep_out: Rep) -> np.ndarray:
    """Field-style action on a kernel: ``rho_out(g) K(g^-1 .) rho_in(g)^-1``."""
    n = rep_in.n
    qt = GroupElement.rotate(j, n).quarter_turns()
    spatial = rotate_grid(kernel, qt)
    return np.einsum("ab,bc...,dc->ad...", rep_out.matrix(j), spatial, rep_in.matrix(j), optimize=True)


def project_kernel_equivariant(kernel: np.ndarray, rep_in: Rep, rep_out: Rep, n: int) -> np.ndarray:
    """Average a free kernel over C_n so it satisfies the steerability constraint.

    The result obeys ``K(g^-1 v) = rho_out(g)^-1 K(v) rho_in(g)`` for every
    rotation g. Representations are orthogonal, so the map is an orthogonal
    projection (self-adjoint and idempotent).
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    _check_kernel_group(kernel, rep_in, rep_out, n)
    acc = np.zeros_like(kernel)
    for j in range(n):
        acc += rotate_kernel(kernel, j, rep_in, rep_out)
    return acc / n


def kernel_constraint_residual(kernel: np.ndarray, rep_in: Rep, rep_out: Rep, n: int) -> float:
    """Max over g of |g.K - K| with g.K the field-style kernel action."""
    kernel = np.asarray(kernel, dtype=np.float64)
    _check_kernel_group(kernel, rep_in, rep_out, n)
    return max(float(np.max(np.abs(rotate_kernel(kernel, j, rep_in, rep_out) - kernel))) for j in range(n))


def project_bias_equivariant(bias: np.ndarray, rep_out: Rep) -> np.ndarray:
    """Project a bias vector onto the rep's invariant subspace."""
    return sum(rep_out.matrix(j) @ bias for j in range(rep_out.n)) / rep_out.n


def equivariant_dim(rep_in: Rep, rep_out: Rep, size: int) -> int:
    """Dimension of the steerable kernel space (trace of the projector)."""
    n = rep_in.n
    tr = 0.0
    for j in range(n):
        qt = GroupElement.rotate(j, n).quarter_turns()
        fixed = size * size if qt == 0 else (1 if size % 2 else 0)
        tr += np.trace(rep_out.matrix(j)) * np.trace(rep_in.matrix(j)) * fixed
    return int(round(tr / n))

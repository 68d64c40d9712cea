"""Equivariant convolution layers.

Every layer maps ``[B, C_in, H, W] -> [B, C_out, H, W]`` except the scale
layers, which carry an extra scale axis ``[B, S, C, H, W]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .groups import (Rep, antialias_sigma, gaussian_blur_matrix, project_bias_equivariant,
                     project_kernel_equivariant, resample_matrix, equivariant_dim)

SYMMETRIES = ("none", "uniform_motion", "magnitude", "rotation", "scale")
ACTIVATIONS = ("relu", "none")
RESIDUAL_ROLES = ("plain", "first_in_residual_block")
SCALE_FRAMES = ("input", "lifted")
MINMAX_FLOOR = 1e-12


def default_scale_grid(count: int = 7, top: float = 3.0) -> tuple[float, ...]:
    """Geometric grid ``top^(k/h)`` for ``k = -h..h`` with ``h = (count-1)/2``."""
    if count < 1 or count % 2 == 0:
        raise ValueError("scale grid size must be odd and positive")
    h = (count - 1) // 2
    if h == 0:
        return (1.0,)
    return tuple(float(top ** (k / h)) for k in range(-h, h + 1))


@dataclass(frozen=True)
class LayerSpec:
    symmetry: str = "none"
    c_in: int = 1
    c_out: int = 1
    kernel: int = 3
    activation: str = "relu"
    residual_role: str = "plain"
    rep_in: Rep | None = None
    rep_out: Rep | None = None
    scale_grid: tuple = (1.0,)
    scale_extent: int = 1
    scale_frame: str = "input"
    padding: str = "periodic"
    bias: bool = True

    def __post_init__(self):
        if self.symmetry not in SYMMETRIES:
            raise ValueError(f"symmetry must be one of {SYMMETRIES}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.residual_role not in RESIDUAL_ROLES:
            raise ValueError(f"residual_role must be one of {RESIDUAL_ROLES}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError("channel counts must be positive")
        if self.symmetry == "rotation":
            if self.rep_in is None or self.rep_out is None:
                raise ValueError("rotation layers need rep_in and rep_out")
            if self.rep_in.dim != self.c_in or self.rep_out.dim != self.c_out:
                raise ValueError(
                    f"channels ({self.c_in}, {self.c_out}) do not match representation dims "
                    f"({self.rep_in.dim}, {self.rep_out.dim})")
            if self.activation == "relu" and not self.rep_out.is_pointwise_safe:
                raise ValueError("pointwise relu is only equivariant on trivial/regular channels")
        if self.symmetry == "uniform_motion":
            if self.c_in % 2:
                raise ValueError("uniform-motion layers read (u, v) channel pairs; c_in must be even")
            if self.residual_role == "plain" and self.c_out % 2:
                raise ValueError("uniform-motion layers that add the mean back need even c_out")
        if self.symmetry == "scale":
            grid = tuple(float(v) for v in self.scale_grid)
            if not grid or min(grid) <= 0:
                raise ValueError("scale_grid must be strictly positive")
            if not any(abs(v - 1.0) < 1e-12 for v in grid):
                raise ValueError("scale_grid must contain 1.0")
            if self.scale_extent < 1 or self.scale_extent % 2 == 0:
                raise ValueError("scale_extent must be odd")
            if self.scale_frame not in SCALE_FRAMES:
                raise ValueError(f"scale_frame must be one of {SCALE_FRAMES}")
            object.__setattr__(self, "scale_grid", grid)


# ---------------------------------------------------------------------------
# functional layer forms
# ---------------------------------------------------------------------------

def _activate(x: Tensor, activation: str) -> Tensor:
    return ad.relu(x) if activation == "relu" else x


def _add_bias(x: Tensor, bias: Tensor | None, axis: int = 1) -> Tensor:
    if bias is None:
        return x
    shape = [1] * x.ndim
    shape[axis] = -1
    return x + bias.reshape(*shape)


def plain_conv(x, kernel, spec: LayerSpec, bias=None) -> Tensor:
    y = _add_bias(ad.conv2d(x, kernel, spec.padding), bias)
    return _activate(y, spec.activation)


def block_mean_uv(x, size: int, padding: str) -> Tensor:
    """Per-sample sliding-block mean of the u channels and of the v channels.

    Returns ``[B, 2, H, W]``; entry ``[b, g, p]`` averages channel group g
    over the ``size x size`` block read at output position p.
    """
    x = ad.as_tensor(x)
    c = x.shape[1]
    box = np.zeros((2, c, size, size))
    box[0, 0::2] = 1.0
    box[1, 1::2] = 1.0
    box /= (c // 2) * size * size
    return ad.conv2d(x, box, padding)


def um_conv(x, kernel, spec: LayerSpec, bias=None) -> Tensor:
    """Convolution conjugated by per-block mean removal.

    For each output position the block mean (separately for u and v
    channels) is subtracted before the convolution and, unless the layer
    is the first of a residual block, added back to the matching output
    channel after the activation. Subtracting the mean from every block is
    the same as correlating with a kernel whose u- and v-slices each have
    zero mean, which is how it is computed. Equivariance is exact with
    periodic padding; zero padding breaks it at the border because the
    padded zeros do not move with the field.
    """
    x, kernel = ad.as_tensor(x), ad.as_tensor(kernel)
    o, c, s, _ = kernel.shape
    if x.shape[1] % 2 or c % 2:
        raise ValueError(f"uniform-motion convolution needs an even channel count, got {x.shape[1]}")
    grouped = kernel.reshape(o, c // 2, 2, s, s)
    centred = (grouped - grouped.mean(axis=(1, 3, 4), keepdims=True)).reshape(o, c, s, s)
    y = _activate(_add_bias(ad.conv2d(x, centred, spec.padding), bias), spec.activation)
    if spec.residual_role == "first_in_residual_block":
        return y
    if o % 2:
        raise ValueError("adding the block mean back needs an even output channel count")
    mu = block_mean_uv(x, s, spec.padding)
    return y + ad.concat([mu] * (o // 2), axis=1)


def minmax_scale(x, size: int, padding: str) -> Tensor:
    """Per-block ``max - min`` over channels and window, with degenerate-block fallbacks."""
    x = ad.as_tensor(x)
    hi = ad.window_extreme(x.max(axis=1, keepdims=True), size, "max", padding)
    lo = ad.window_extreme(x.min(axis=1, keepdims=True), size, "min", padding)
    spread = hi - lo
    absmax = ad.window_extreme(ad.absolute(x).max(axis=1, keepdims=True), size, "max", padding)
    use_spread = spread.data >= MINMAX_FLOOR
    use_abs = (~use_spread) & (absmax.data >= MINMAX_FLOOR)
    return ad.where(use_spread, spread, ad.where(use_abs, absmax, Tensor(np.ones(spread.shape))))


def mag_conv(x, kernel, spec: LayerSpec, bias=None) -> Tensor:
    """Convolution conjugated by the per-block MinMax scale: ``s * act(conv(x)/s + b)``.

    Blocks that are identically zero give zero output, which keeps
    ``f(lam x) = lam f(x)`` exact for every input including zero.
    """
    x, kernel = ad.as_tensor(x), ad.as_tensor(kernel)
    s = minmax_scale(x, kernel.shape[-1], spec.padding)
    y = _activate(_add_bias(ad.conv2d(x, kernel, spec.padding) / s, bias), spec.activation)
    # an all-zero block divides by 1 but scales back by 0, so f(0) = 0
    live = ad.window_extreme(ad.absolute(x).max(axis=1, keepdims=True), kernel.shape[-1], "max",
                             spec.padding).data >= MINMAX_FLOOR
    return y * ad.where(live, s, Tensor(np.zeros(s.shape)))


def steer(kernel, rep_in: Rep, rep_out: Rep) -> Tensor:
    """Differentiable kernel projection; the projector is self-adjoint."""
    n = rep_in.n

    def proj(k):
        return project_kernel_equivariant(k, rep_in, rep_out, n)

    return ad.linear_map(kernel, proj, proj, "steer")


def steer_bias(bias, rep_out: Rep) -> Tensor:
    def proj(b):
        return project_bias_equivariant(b, rep_out)

    return ad.linear_map(bias, proj, proj, "steer_bias")


def rot_conv(x, kernel_free, spec: LayerSpec, bias_free=None) -> Tensor:
    """Convolution with a steerable kernel obtained by projecting a free kernel."""
    k = steer(kernel_free, spec.rep_in, spec.rep_out)
    b = None if bias_free is None else steer_bias(bias_free, spec.rep_out)
    return _activate(_add_bias(ad.conv2d(x, k, spec.padding), b), spec.activation)


# ---------------------------------------------------------------------------
# scale layers
# ---------------------------------------------------------------------------

def time_resample_matrix(frames: int, lifted_frames: int, lam: float) -> np.ndarray:
    """Linear interpolation rows sampling frames at ``newest - lam^2 * j``."""
    newest = frames - 1
    span = lam * lam * (lifted_frames - 1)
    if span > newest + 1e-9:
        raise ValueError(
            f"{frames} input frames are too few to resample {lifted_frames} frames at scale {lam:.4g} "
            f"(needs {span + 1:.4g})")
    m = np.zeros((lifted_frames, frames))
    for j in range(lifted_frames):
        t = newest - lam * lam * (lifted_frames - 1 - j)
        t = min(max(t, 0.0), newest)
        i0 = int(np.floor(t))
        f = t - i0
        m[j, i0] += 1.0 - f
        if f > 0:
            m[j, i0 + 1] += f
    return m


def scale_lift(w, scale_grid: Sequence[float], channels: int, channel_rep: str = "scalar",
               lifted_frames: int | None = None, spatial: str = "resample") -> Tensor:
    """Lift ``[B, T*C, H, W]`` to ``[B, S, T'*C, H, W]`` with one slice per scale.

    Slice ``lam`` holds ``lam^m w(lam x, lam^2 t)``: frames are linearly
    interpolated at times ``lam^2 j`` before the newest frame, the grid is
    rescaled about its centre (``spatial="resample"``) or only antialiased
    (``spatial="blur"``, the input-frame convention used with dilated
    kernels), and ``m`` is 1 for vector fields and 0 for scalar fields.
    """
    w = ad.as_tensor(w)
    b, tc, h, wd = w.shape
    if tc % channels:
        raise ValueError(f"{tc} channels are not a whole number of {channels}-channel frames")
    frames = tc // channels
    lifted_frames = frames if lifted_frames is None else lifted_frames
    if spatial not in ("resample", "blur"):
        raise ValueError("spatial must be 'resample' or 'blur'")
    mats = []
    for lam in scale_grid:
        tm = time_resample_matrix(frames, lifted_frames, lam)
        if spatial == "resample":
            ay, ax = resample_matrix(h, lam), resample_matrix(wd, lam)
        else:
            sig = antialias_sigma(lam)
            ay, ax = gaussian_blur_matrix(h, sig), gaussian_blur_matrix(wd, sig)
        mag = lam if channel_rep == "vector2" else 1.0
        mats.append((mag * tm, ay, ax))

    def fwd(x):
        x = x.reshape(b, frames, channels, h, wd)
        return np.stack([
            np.einsum("jt,btchw,yh,xw->bjcyx", tm, x, ay, ax, optimize=True).reshape(b, -1, h, wd)
            for tm, ay, ax in mats], axis=1)

    def adj(g):
        g = g.reshape(b, len(mats), lifted_frames, channels, h, wd)
        out = sum(np.einsum("jt,bjcyx,yh,xw->btchw", tm, g[:, i], ay, ax, optimize=True)
                  for i, (tm, ay, ax) in enumerate(mats))
        return out.reshape(b, tc, h, wd)

    return ad.linear_map(w, fwd, adj, "scale_lift")


def dilated_tap_matrix(size: int, lam: float) -> tuple[np.ndarray, int]:
    """Spread kernel taps placed at ``lam * q`` onto an integer grid.

    Returns ``(E, size_eff)`` with ``E`` of shape ``[size_eff, size]`` so a
    1D kernel ``k`` expands to ``E @ k``; the 2D expansion is separable.
    Integer ``lam`` is an exact dilation.
    """
    r = size // 2
    reach = int(np.ceil(lam * r - 1e-9))
    size_eff = 2 * reach + 1
    e = np.zeros((size_eff, size))
    for qi in range(size):
        pos = lam * (qi - r) + reach
        i0 = int(np.floor(pos + 1e-12))
        f = pos - i0
        if abs(f) < 1e-12:
            e[i0, qi] += 1.0
        else:
            e[i0, qi] += 1.0 - f
            e[i0 + 1, qi] += f
    return e, size_eff


def expand_kernel(kernel, lam: float) -> Tensor:
    """Kernel whose taps sit at ``lam * q`` (bilinear spread, exact for integer lam)."""
    kernel = ad.as_tensor(kernel)
    s = kernel.shape[-1]
    e, _ = dilated_tap_matrix(s, lam)

    def fwd(k):
        return np.einsum("ai,ocij,bj->ocab", e, k, e, optimize=True)

    def adj(g):
        return np.einsum("ai,ocab,bj->ocij", e, g, e, optimize=True)

    return ad.linear_map(kernel, fwd, adj, "expand_kernel")


def scale_group_correlation(v, kernel, spec: LayerSpec, bias=None) -> Tensor:
    """Correlation over translations and scales: ``[B,S,C,H,W] -> [B,S,C_out,H,W]``.

    ``kernel`` is ``[C_out, C, s, s, E]`` with ``E = spec.scale_extent`` taps
    along the scale axis, centred on the output slice and truncated at the
    ends of the grid. In the ``input`` frame the spatial taps of slice
    ``sigma`` sit at ``lam_sigma * q``; in the ``lifted`` frame taps are unit
    spaced and shifting the scale index of the input shifts the output.
    """
    v, kernel = ad.as_tensor(v), ad.as_tensor(kernel)
    grid = spec.scale_grid
    b, n_s, c, h, w = v.shape
    if n_s != len(grid):
        raise ValueError(f"input has {n_s} scale slices but the grid has {len(grid)}")
    o, kc, s, s2, extent = kernel.shape
    if kc != c or s != s2 or extent != spec.scale_extent:
        raise ValueError(f"kernel shape {kernel.shape} does not fit input channels {c}")
    half = extent // 2
    taps = [kernel[..., e] for e in range(extent)]
    if spec.padding != "periodic":
        return _scale_gc_padded(v, taps, spec, bias)
    plan = []
    for sig, lam in enumerate(grid):
        if spec.scale_frame == "input":
            reach = dilated_tap_matrix(s, lam)[1]
            if reach > min(h, w):
                raise ValueError(f"kernel reach {reach} at scale {lam:.4g} exceeds the grid {h}x{w}")
            ks = [expand_kernel(t, lam) for t in taps]
        else:
            ks = taps
        plan.append([(sig + e - half, ks[e]) for e in range(extent) if 0 <= sig + e - half < n_s])
    y = ad.slice_correlation(v, plan)
    return _activate(_add_bias(y, bias, axis=2), spec.activation)


def _scale_gc_padded(v: Tensor, taps, spec: LayerSpec, bias) -> Tensor:
    """Slice-by-slice form of the group correlation for non-periodic padding."""
    n_s = v.shape[1]
    half = spec.scale_extent // 2
    outs = []
    for sig, lam in enumerate(spec.scale_grid):
        ks = [expand_kernel(t, lam) for t in taps] if spec.scale_frame == "input" else taps
        acc = None
        for e in range(spec.scale_extent):
            src = sig + e - half
            if not 0 <= src < n_s:
                continue
            term = ad.conv2d(v[:, src], ks[e], spec.padding)
            acc = term if acc is None else acc + term
        outs.append(_activate(_add_bias(acc, bias), spec.activation))
    return ad.stack(outs, axis=1)


def scale_project(v) -> Tensor:
    """Max over the scale axis: ``[B,S,C,H,W] -> [B,C,H,W]``."""
    return ad.as_tensor(v).max(axis=1)


def scale_steerable_kernel_basis(size: int, lambdas: Sequence[float], grid: int = 24,
                                 n_probe: int = 3, seed: int = 0, tol: float = 1e-8) -> np.ndarray:
    """Numerical basis of ``size x size`` kernels that commute with rescaling.

    Solves ``conv(S_lam x, K) = S_lam conv(x, K)`` in least squares over
    random probes and the given factors (zero padding, no antialiasing).
    Returns an orthonormal basis ``[k, size*size]`` of the solution space.
    """
    rng = np.random.default_rng(seed)
    rows = []
    basis = np.eye(size * size).reshape(size * size, 1, 1, size, size)
    for _ in range(n_probe):
        x = rng.normal(size=(1, 1, grid, grid))
        for lam in lambdas:
            ay, ax = resample_matrix(grid, lam, False), resample_matrix(grid, lam, False)
            sx = np.einsum("yh,bchw,xw->bcyx", ay, x, ax)
            cols = []
            for k in basis:
                lhs = ad.conv2d(sx, k, "zero").data
                rhs = np.einsum("yh,bchw,xw->bcyx", ay, ad.conv2d(x, k, "zero").data, ax)
                cols.append((lhs - rhs).ravel())
            rows.append(np.stack(cols, axis=1))
    m = np.concatenate(rows, axis=0)
    _, sv, vt = np.linalg.svd(m, full_matrices=True)
    sv = np.concatenate([sv, np.zeros(vt.shape[0] - sv.size)])
    return vt[sv <= tol * max(sv.max(), 1.0)]


# ---------------------------------------------------------------------------
# stateful layers
# ---------------------------------------------------------------------------

def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Layer:
    """A parameterised layer built from a :class:`LayerSpec`."""

    spec: LayerSpec
    params: dict = field(default_factory=dict)

    @classmethod
    def build(cls, spec: LayerSpec, rng: np.random.Generator, zero: bool = False,
              gain: float = 1.0) -> "Layer":
        s = spec.kernel
        fan_in = spec.c_in * s * s * (spec.scale_extent if spec.symmetry == "scale" else 1)
        bound = 0.0 if zero else gain / np.sqrt(fan_in)
        if spec.symmetry == "scale":
            shape = (spec.c_out, spec.c_in, s, s, spec.scale_extent)
        else:
            shape = (spec.c_out, spec.c_in, s, s)
        if spec.symmetry == "rotation":
            # projection keeps a fraction of the free variance; compensate
            free = spec.c_out * spec.c_in * s * s
            kept = max(equivariant_dim(spec.rep_in, spec.rep_out, s), 1)
            bound *= np.sqrt(free / kept)
        params = {"kernel": Tensor(_uniform(rng, shape, bound), requires_grad=True)}
        if spec.bias:
            params["bias"] = Tensor(_uniform(rng, (spec.c_out,), bound), requires_grad=True)
        return cls(spec, params)

    def __call__(self, x) -> Tensor:
        k, b = self.params["kernel"], self.params.get("bias")
        fn = {
            "none": plain_conv,
            "uniform_motion": um_conv,
            "magnitude": mag_conv,
            "rotation": rot_conv,
            "scale": scale_group_correlation,
        }[self.spec.symmetry]
        return fn(x, k, self.spec, b)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def effective_parameter_count(self) -> int:
        """Free parameters after any equivariance constraint."""
        spec = self.spec
        if spec.symmetry != "rotation":
            return sum(p.data.size for p in self.parameters())
        n = equivariant_dim(spec.rep_in, spec.rep_out, spec.kernel)
        if spec.bias:
            n += int(round(sum(np.trace(spec.rep_out.matrix(j)) for j in range(spec.rep_out.n)) / spec.rep_out.n))
        return n


# ---------------------------------------------------------------------------
# uniform-motion negative control
# ---------------------------------------------------------------------------

def uniform_motion_error(layer_fn, x: np.ndarray, shift=(1.0, 1.0)) -> float:
    """Max abs of ``f(x + c) - (f(x) + c)`` for a constant (u, v) shift."""
    c = np.zeros(x.shape[1])
    c[0::2], c[1::2] = shift
    with ad.no_grad():
        y0 = layer_fn(x).data
        y1 = layer_fn(x + c[None, :, None, None]).data
    cy = np.zeros(y0.shape[1])
    cy[0::2], cy[1::2] = shift
    return float(np.max(np.abs(y1 - y0 - cy[None, :, None, None])))


def um_affine_negative_test(seed: int = 0, size: int = 12, channels: int = 2) -> bool:
    """Mean conjugation is what makes a relu CNN uniform-motion equivariant.

    Checks three cases on one random input: a plain conv+relu stack is far
    from equivariant; a linear conv whose kernel sums to one per component
    is equivariant; the mean-conjugated layer with the same weights is
    equivariant.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, channels, size, size))
    w = rng.normal(size=(channels, channels, 3, 3))
    b = rng.normal(size=(channels,))
    relu_spec = LayerSpec("none", channels, channels, 3, "relu")
    plain_err = uniform_motion_error(lambda t: plain_conv(t, w, relu_spec, Tensor(b)), x)

    # kernel acting componentwise with unit sum: the only linear equivariant case
    aff = np.zeros_like(w)
    for ch in range(channels):
        k = rng.uniform(size=(3, 3))
        aff[ch, ch] = k / k.sum()
    lin_spec = LayerSpec("none", channels, channels, 3, "none")
    affine_err = uniform_motion_error(lambda t: plain_conv(t, aff, lin_spec, Tensor(b)), x)

    um_spec = LayerSpec("uniform_motion", channels, channels, 3, "relu")
    um_err = uniform_motion_error(lambda t: um_conv(t, w, um_spec, Tensor(b)), x)
    return plain_err > 0.1 and affine_err < 1e-10 and um_err < 1e-10

"""Forecasting networks: assembly, rollout, training and checkpoints."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .groups import Field, Rep
from .layers import Layer, LayerSpec, default_scale_grid, scale_lift, scale_project

ARCHS = ("resnet", "unet", "shallow_cnn")
CHECKPOINT_MAGIC = b"EQDM"
CHECKPOINT_VERSION = 1
HEAD_GAIN = 0.1  # small output layer: training starts near the identity-skip forecast


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "shallow_cnn"
    symmetry: str = "none"
    depth: int = 3
    width: int = 16
    input_frames: int = 8
    grid: int = 32
    channel_rep: str = "scalar"
    kernel: int = 3
    group_order: int = 4
    scale_grid: tuple = field(default_factory=default_scale_grid)
    lifted_frames: int = 2
    scale_extent: int = 3
    padding: str = "periodic"
    skip_last: bool = True

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}")
        if self.input_frames < 1:
            raise ValueError("input_frames must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.arch == "resnet" and self.depth % 2:
            raise ValueError("resnet depth must be even (layers come in residual pairs)")
        if self.arch == "shallow_cnn" and self.depth < 2:
            raise ValueError("shallow_cnn needs at least two layers")
        if self.symmetry == "scale" and self.arch == "unet":
            raise ValueError("scale symmetry is not supported for the unet architecture")
        if self.symmetry == "uniform_motion" and self.channel_rep != "vector2":
            raise ValueError("uniform-motion models need vector2 data")
        if self.symmetry == "rotation":
            if self.group_order not in (1, 2, 4):
                raise ValueError("rotation models support group orders 1, 2 and 4")
            if self.width < self.group_order:
                raise ValueError("rotation width must hold at least one regular block")
        if self.symmetry == "uniform_motion" and self.width % 2:
            raise ValueError("uniform-motion width must be even")
        if self.arch == "unet" and self.grid % (2 ** self.depth):
            raise ValueError(f"unet depth {self.depth} needs grid divisible by {2 ** self.depth}")
        object.__setattr__(self, "scale_grid", tuple(float(v) for v in self.scale_grid))

    @property
    def frame_channels(self) -> int:
        return 2 if self.channel_rep == "vector2" else 1

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model spec keys: {sorted(unknown)}")
        d = dict(d)
        if "scale_grid" in d:
            d["scale_grid"] = tuple(d["scale_grid"])
        return cls(**d)


@dataclass
class RolloutResult:
    predictions: list
    per_step_rmse: list


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------

class Model:
    """A layer graph built from a :class:`ModelSpec` (see ``build``)."""

    def __init__(self, spec: ModelSpec, layers: dict, forward_fn: Callable):
        self.spec = spec
        self.layers = layers
        self._forward = forward_fn

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        c = self.spec.input_frames * self.spec.frame_channels
        if x.ndim != 4 or x.shape[1] != c:
            raise ValueError(f"expected input [B,{c},H,W], got {x.shape}")
        y = self._forward(self, x)
        if self.spec.skip_last:
            # identity skip from the newest frame: the network predicts the increment
            y = y + x[:, -self.spec.frame_channels:]
        return y

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers.values() for p in layer.parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{name}.{k}", p) for name, layer in self.layers.items() for k, p in layer.params.items()]

    def num_parameters(self) -> int:
        """Effective (free) parameter count."""
        return sum(layer.effective_parameter_count() for layer in self.layers.values())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()]) if self.layers else np.zeros(0)

    def set_flat(self, flat: np.ndarray) -> None:
        i = 0
        for p in self.parameters():
            n = p.data.size
            p.data = np.array(flat[i:i + n], dtype=np.float64).reshape(p.data.shape)
            i += n
        if i != flat.size:
            raise ValueError(f"parameter vector has {flat.size} entries, model needs {i}")


def _reps(spec: ModelSpec, frames: int) -> Rep:
    n = spec.group_order
    return Rep.for_channels(spec.channel_rep, frames * spec.frame_channels, n)


def _layer_spec(spec: ModelSpec, c_in: int, c_out: int, activation: str, *, rep_in=None, rep_out=None,
                role: str = "plain", kernel: int | None = None, symmetry: str | None = None,
                bias: bool = True) -> LayerSpec:
    sym = spec.symmetry if symmetry is None else symmetry
    return LayerSpec(
        symmetry=sym, c_in=c_in, c_out=c_out, kernel=spec.kernel if kernel is None else kernel,
        activation=activation, residual_role=role, rep_in=rep_in, rep_out=rep_out,
        scale_grid=spec.scale_grid if sym == "scale" else (1.0,),
        scale_extent=spec.scale_extent if sym == "scale" else 1,
        padding=spec.padding, bias=bias)


def _hidden(spec: ModelSpec, width: int):
    """Representation of a hidden feature map of ``width`` channels."""
    if spec.symmetry == "rotation":
        # regular blocks, topped up with invariant channels when width is not a multiple of n
        n = spec.group_order
        return Rep.regular(width // n, n) + Rep.trivial(width % n, n)
    return None


def _conv_specs_chain(spec: ModelSpec, widths: Sequence[int], in_rep, out_rep, final_act: str = "none"):
    """Specs for a straight chain of layers with the given channel widths."""
    out = []
    for i in range(len(widths) - 1):
        last = i == len(widths) - 2
        act = final_act if last else "relu"
        ri = in_rep if i == 0 else _hidden(spec, widths[i])
        ro = out_rep if last else _hidden(spec, widths[i + 1])
        out.append(_layer_spec(spec, widths[i], widths[i + 1], act, rep_in=ri, rep_out=ro,
                               bias=_bias_ok(spec, ro, last), role=_head_role(spec) if last else "plain"))
    return out


def _head_role(spec: ModelSpec) -> str:
    # with the identity skip the increment must be uniform-motion invariant
    return "first_in_residual_block" if spec.skip_last and spec.symmetry == "uniform_motion" else "plain"


def _bias_ok(spec: ModelSpec, rep_out, last: bool) -> bool:
    if spec.symmetry == "rotation" and rep_out is not None and rep_out.is_pointwise_safe is False:
        return False
    return True


def build(spec: ModelSpec, seed: int = 0, zero: bool = False) -> Model:
    """Deterministically initialise a model from ``spec`` and ``seed``."""
    rng = np.random.default_rng(seed)
    c = spec.frame_channels
    l = spec.input_frames
    w = spec.width
    in_rep = _reps(spec, l) if spec.symmetry == "rotation" else None
    out_rep = _reps(spec, 1) if spec.symmetry == "rotation" else None
    layers: dict = {}

    if spec.symmetry == "scale":
        return _build_scale(spec, rng, zero)

    if spec.arch == "shallow_cnn":
        widths = [l * c] + [w] * (spec.depth - 1) + [c]
        chain = _conv_specs_chain(spec, widths, in_rep, out_rep)
        for i, ls in enumerate(chain):
            layers[f"conv{i}"] = Layer.build(ls, rng, zero, HEAD_GAIN if i == len(chain) - 1 else 1.0)

        def fwd(model, x):
            for layer in model.layers.values():
                x = layer(x)
            return x

        return Model(spec, layers, fwd)

    if spec.arch == "resnet":
        hid = _hidden(spec, w)
        layers["stem"] = Layer.build(_layer_spec(spec, l * c, w, "relu", rep_in=in_rep, rep_out=hid), rng, zero)
        role = "first_in_residual_block" if spec.symmetry == "uniform_motion" else "plain"
        for b in range(spec.depth // 2):
            layers[f"block{b}a"] = Layer.build(
                _layer_spec(spec, w, w, "relu", rep_in=hid, rep_out=hid, role=role), rng, zero)
            layers[f"block{b}b"] = Layer.build(
                _layer_spec(spec, w, w, "none", rep_in=hid, rep_out=hid, role=role), rng, zero)
        layers["head"] = Layer.build(
            _layer_spec(spec, w, c, "none", rep_in=hid, rep_out=out_rep, bias=_bias_ok(spec, out_rep, True),
                        role=_head_role(spec)),
            rng, zero, HEAD_GAIN)

        def fwd(model, x):
            h = model.layers["stem"](x)
            for b in range(model.spec.depth // 2):
                h = h + model.layers[f"block{b}b"](model.layers[f"block{b}a"](h))
            return model.layers["head"](h)

        return Model(spec, layers, fwd)

    # unet: conv at each level, average-pool down, nearest upsample, concatenated skips
    widths = [w * 2 ** i for i in range(spec.depth + 1)]
    prev, prev_rep = l * c, in_rep
    for i, wi in enumerate(widths):
        hid = _hidden(spec, wi)
        layers[f"down{i}"] = Layer.build(_layer_spec(spec, prev, wi, "relu", rep_in=prev_rep, rep_out=hid),
                                         rng, zero)
        prev, prev_rep = wi, hid
    for i in reversed(range(spec.depth)):
        wi = widths[i]
        cat = prev + wi
        cat_rep = None if spec.symmetry != "rotation" else prev_rep + _hidden(spec, wi)
        hid = _hidden(spec, wi)
        layers[f"up{i}"] = Layer.build(_layer_spec(spec, cat, wi, "relu", rep_in=cat_rep, rep_out=hid), rng, zero)
        prev, prev_rep = wi, hid
    layers["head"] = Layer.build(
        _layer_spec(spec, prev, c, "none", rep_in=prev_rep, rep_out=out_rep, kernel=1,
                    bias=_bias_ok(spec, out_rep, True), role=_head_role(spec)), rng, zero, HEAD_GAIN)

    def fwd(model, x):
        skips = []
        h = x
        for i in range(model.spec.depth + 1):
            h = model.layers[f"down{i}"](h)
            if i < model.spec.depth:
                skips.append(h)
                h = ad.avg_pool2(h)
        for i in reversed(range(model.spec.depth)):
            h = ad.concat([ad.upsample2(h), skips[i]], axis=1)
            h = model.layers[f"up{i}"](h)
        return model.layers["head"](h)

    return Model(spec, layers, fwd)


def _build_scale(spec: ModelSpec, rng: np.random.Generator, zero: bool) -> Model:
    c = spec.frame_channels
    w = spec.width
    t_lift = spec.lifted_frames
    layers: dict = {}
    if spec.arch == "shallow_cnn":
        widths = [t_lift * c] + [w] * (spec.depth - 1)
        for i in range(len(widths) - 1):
            layers[f"gc{i}"] = Layer.build(_layer_spec(spec, widths[i], widths[i + 1], "relu"), rng, zero)
    else:
        layers["stem"] = Layer.build(_layer_spec(spec, t_lift * c, w, "relu"), rng, zero)
        for b in range(spec.depth // 2):
            layers[f"block{b}a"] = Layer.build(_layer_spec(spec, w, w, "relu"), rng, zero)
            layers[f"block{b}b"] = Layer.build(_layer_spec(spec, w, w, "none"), rng, zero)
    # pointwise head after pooling over scales; no bias so vector magnitudes scale
    layers["head"] = Layer.build(_layer_spec(spec, w, c, "none", kernel=1, symmetry="none",
                                             bias=spec.channel_rep == "scalar"), rng, zero, HEAD_GAIN)

    def fwd(model, x):
        sp = model.spec
        h = scale_lift(x, sp.scale_grid, sp.frame_channels, sp.channel_rep, sp.lifted_frames, spatial="blur")
        if sp.arch == "shallow_cnn":
            for i in range(sp.depth - 1):
                h = model.layers[f"gc{i}"](h)
        else:
            h = model.layers["stem"](h)
            for b in range(sp.depth // 2):
                h = h + model.layers[f"block{b}b"](model.layers[f"block{b}a"](h))
        return model.layers["head"](scale_project(h))

    return Model(spec, layers, fwd)


def matched_width(spec: ModelSpec, target: int, candidates: Sequence[int] | None = None) -> int:
    """Width whose effective parameter count is closest to ``target``."""
    step = 2 if spec.symmetry == "uniform_motion" else 1
    candidates = candidates or range(step, 257, step)
    best, best_gap = None, None
    for wdt in candidates:
        try:
            s = ModelSpec(**{**asdict(spec), "width": wdt})
        except ValueError:
            continue
        n = build(s, 0, zero=True).num_parameters()
        gap = abs(n - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = wdt, gap
        if n > target * 1.5:
            break
    return best


# ---------------------------------------------------------------------------
# forward prediction and rollout
# ---------------------------------------------------------------------------

def forward(model: Model, window) -> Field:
    """One-step prediction from a single ``[l*C, H, W]`` window."""
    arr = np.asarray(window.data if isinstance(window, Tensor) else window, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"window must be [l*C,H,W], got {arr.shape}")
    with ad.no_grad():
        y = model(arr[None]).data[0]
    return Field(y, model.spec.channel_rep)


def rollout_tensor(model: Model, x, steps: int) -> list[Tensor]:
    """Autoregressive predictions; each step drops the oldest frame and appends the prediction."""
    if steps < 1:
        raise ValueError("horizon must be >= 1")
    c = model.spec.frame_channels
    x = ad.as_tensor(x)
    preds = []
    for k in range(steps):
        y = model(x)
        preds.append(y)
        if k + 1 < steps:
            x = ad.concat([x[:, c:], y], axis=1)
    return preds


def rollout(model: Model, window, horizon: int, truth=None) -> RolloutResult:
    arr = np.asarray(window, dtype=np.float64)
    with ad.no_grad():
        preds = [p.data[0] for p in rollout_tensor(model, arr[None], horizon)]
    fields_out = [Field(p, model.spec.channel_rep) for p in preds]
    per_step = []
    if truth is not None:
        truth = np.asarray(truth, dtype=np.float64)
        per_step = [float(np.sqrt(np.mean((p - t) ** 2))) for p, t in zip(preds, truth)]
    return RolloutResult(fields_out, per_step)


def predict_batch(model: Model, x: np.ndarray, horizon: int, batch: int = 32) -> np.ndarray:
    """Rollouts for a stack of windows: ``[N, l*C, H, W] -> [N, horizon, C, H, W]``."""
    out = []
    with ad.no_grad():
        for i in range(0, len(x), batch):
            preds = rollout_tensor(model, x[i:i + batch], horizon)
            out.append(np.stack([p.data for p in preds], axis=1))
    return np.concatenate(out, axis=0) if out else np.zeros((0, horizon))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    k_accum: int = 3
    epochs: int = 10
    batch: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"  # or "cosine": per-epoch half-cosine decay from lr

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return 0.5 * self.lr * (1.0 + np.cos(np.pi * epoch / self.epochs))


class DivergenceError(FloatingPointError):
    """Raised when the training loss stops being finite."""


@dataclass
class Adam:
    """Adaptive first/second-moment optimiser over a fixed parameter list."""

    params: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {"step": self.step_count, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        self.m = [np.array(a, dtype=np.float64) for a in state["m"]]
        self.v = [np.array(a, dtype=np.float64) for a in state["v"]]


def rollout_loss(model: Model, x, y, k: int) -> Tensor:
    """Sum over the first ``k`` autoregressive steps of the per-step MSE."""
    preds = rollout_tensor(model, x, k)
    loss = None
    for i, p in enumerate(preds):
        term = ad.mse(p, y[:, i])
        loss = term if loss is None else loss + term
    return loss


def evaluate_loss(model: Model, x: np.ndarray, y: np.ndarray, k: int, batch: int = 32) -> float:
    if len(x) == 0:
        return float("nan")
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(x), batch):
            xb, yb = x[i:i + batch], y[i:i + batch]
            total += rollout_loss(model, xb, yb, k).item() * len(xb)
    return total / len(x)


@dataclass
class TrainResult:
    rows: list  # (epoch, train_loss, val_loss)
    optimizer: Adam
    epochs_done: int


def train(model: Model, x_train: np.ndarray, y_train: np.ndarray, config: TrainConfig,
          x_val: np.ndarray | None = None, y_val: np.ndarray | None = None,
          optimizer: Adam | None = None, start_epoch: int = 0,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Minimise the k-step rollout MSE with Adam; deterministic given ``config.seed``.

    Each epoch draws its own permutation from ``(seed, epoch)`` so a run
    resumed from a checkpoint continues exactly as an uninterrupted one.
    """
    k = config.k_accum
    if y_train.shape[1] < k:
        raise ValueError(f"targets hold {y_train.shape[1]} steps, k_accum={k}")
    params = model.parameters()
    opt = optimizer or Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    rows = []
    n = len(x_train)
    for epoch in range(start_epoch, config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        opt.lr = config.lr_at(epoch)
        total = 0.0
        for i in range(0, n, config.batch):
            idx = order[i:i + config.batch]
            opt.zero_grad()
            try:
                loss = rollout_loss(model, x_train[idx], y_train[idx], k)
            except FloatingPointError as exc:
                raise DivergenceError(f"non-finite values at epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"loss is not finite at epoch {epoch}")
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        train_loss = total / max(n, 1)
        val_loss = evaluate_loss(model, x_val, y_val, k) if x_val is not None and len(x_val) else float("nan")
        rows.append((epoch, train_loss, val_loss))
        if log:
            log(f"epoch {epoch} train {train_loss:.6g} val {val_loss:.6g}")
    return TrainResult(rows, opt, config.epochs)


def loss_gradient(model: Model, x: np.ndarray, y: np.ndarray, k: int = 1) -> np.ndarray:
    """Flat gradient of the rollout MSE with respect to all parameters."""
    for p in model.parameters():
        p.grad = None
    ad.backward(rollout_loss(model, x, y, k))
    return np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
                           for p in model.parameters()])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _write_array(buf, a: np.ndarray) -> None:
    a = np.ascontiguousarray(a, dtype="<f8")
    buf.write(struct.pack("<I", a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(a.tobytes())


def _read_array(buf) -> np.ndarray:
    (ndim,) = struct.unpack("<I", buf.read(4))
    shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    raw = buf.read(8 * count)
    if len(raw) != 8 * count:
        raise ValueError("truncated checkpoint")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def checkpoint_bytes(model: Model, optimizer: Adam | None = None, meta: dict | None = None) -> bytes:
    """Serialise ``EQDM | u32 version | u32 len | JSON header | tensors | optimizer state``."""
    header = {"spec": json.loads(model.spec.to_json()), "meta": meta or {},
              "names": [n for n, _ in model.named_parameters()]}
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
    buf.write(hb)
    params = model.parameters()
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        _write_array(buf, p.data)
    if optimizer is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<BQ", 1, optimizer.step_count))
        for a in optimizer.m + optimizer.v:
            _write_array(buf, a)
    return buf.getvalue()


def save_checkpoint(path, model: Model, optimizer: Adam | None = None, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, optimizer, meta))


def load_checkpoint(path) -> tuple[Model, dict | None, dict]:
    """Return ``(model, optimizer_state or None, meta)``."""
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not an EQDM checkpoint")
    version, hlen = struct.unpack("<II", buf.read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(buf.read(hlen))
    spec = ModelSpec.from_dict(header["spec"])
    model = build(spec, 0, zero=True)
    (count,) = struct.unpack("<I", buf.read(4))
    params = model.parameters()
    if count != len(params):
        raise ValueError(f"checkpoint has {count} tensors, model expects {len(params)}")
    for p in params:
        a = _read_array(buf)
        if a.shape != p.data.shape:
            raise ValueError(f"tensor shape {a.shape} != expected {p.data.shape}")
        p.data = a
    (flag,) = struct.unpack("<B", buf.read(1))
    opt_state = None
    if flag:
        (step,) = struct.unpack("<Q", buf.read(8))
        arrays = [_read_array(buf) for _ in range(2 * len(params))]
        opt_state = {"step": step, "m": arrays[:len(params)], "v": arrays[len(params):]}
    return model, opt_state, header.get("meta", {})

"""Command-line front end: ``eqdyn {generate,train,eval,verify}``.

Configuration is plain ``key=value`` text (``#`` starts a comment), read
from ``--config`` and then overridden by ``key=value`` arguments. Unknown
keys are rejected.

Exit codes: 0 success, 2 configuration error, 3 non-finite numbers,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import models as M
from .dynamics import (TRANSFORMS, CorpusConfig, Dataset, Trajectory, generate_corpus, make_datasets,
                       make_transformed_testset, read_trajectory, write_trajectory)
from .groups import GroupElement, act_on_array
from .metrics import component_sum_loss, ese, metrics_csv, rmse, thermal_energy_loss

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
TRUTH_STUB = "@truth"
CHECKPOINT_NAME = "model.eqdm"


class ConfigError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # model
    arch: str = "shallow_cnn"
    symmetry: str = "none"
    depth: int = 3
    width: int = 16
    kernel: int = 3
    l: int = 10
    lifted_frames: int = 2
    # data
    kind: str = "heat"
    n_traj: int = 200
    grid: int = 32
    frames: int = 60
    alpha_min: float = 0.5
    alpha_max: float = 1.5
    dx: float = 1.0
    dt: float = 0.5
    substeps: int = 4
    boundary: str = "periodic"
    anisotropy: float = 3.0
    horizon: int = 5
    max_train: int = 0  # 0 keeps every window
    max_test: int = 0
    # training
    k_accum: int = 3
    lr: float = 1e-3
    schedule: str = "constant"  # cosine decay depends on epochs, so resume then needs the same total
    epochs: int = 4
    batch: int = 16
    resume: str = ""
    # evaluation and verification
    transforms: tuple = ("orig",)
    rotation_step: float = float(np.pi / 2)
    checkpoint: str = ""
    n_samples: int = 8
    tolerance: float = 1e-8
    # run
    seed: int = 0
    data: str = ""
    out: str = "out"

    def corpus(self) -> CorpusConfig:
        return CorpusConfig(n_traj=self.n_traj, grid=self.grid, frames=self.frames,
                            alpha_range=(self.alpha_min, self.alpha_max), dx=self.dx, dt=self.dt,
                            substeps=self.substeps, boundary=self.boundary, kind=self.kind,
                            anisotropy=self.anisotropy, seed=self.seed)

    def model_spec(self) -> M.ModelSpec:
        return M.ModelSpec(arch=self.arch, symmetry=self.symmetry, depth=self.depth, width=self.width,
                           input_frames=self.l, grid=self.grid, kernel=self.kernel,
                           channel_rep="vector2" if self.kind == "velocity" else "scalar",
                           lifted_frames=self.lifted_frames)

    def train_config(self) -> M.TrainConfig:
        return M.TrainConfig(lr=self.lr, k_accum=self.k_accum, epochs=self.epochs, batch=self.batch, seed=self.seed,
                             schedule=self.schedule)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, text: str):
    default = _FIELDS[key].default
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(s.strip() for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    return text


def parse_pairs(lines: Sequence[str], source: str = "<args>") -> dict:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, val)
    return out


def load_config(path: str | None, overrides: Sequence[str] = (), seed: int | None = None,
                out: str | None = None) -> RunConfig:
    values = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        values.update(parse_pairs(p.read_text().splitlines(), str(p)))
    values.update(parse_pairs(overrides))
    if seed is not None:
        values["seed"] = seed
    if out is not None:
        values["out"] = out
    cfg = RunConfig(**values)
    bad = set(cfg.transforms) - {"orig", *TRANSFORMS}
    if bad:
        raise ConfigError(f"unknown transforms {sorted(bad)}")
    return cfg


def _out_file(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, threads: int = 1, force: bool = False) -> list[Path]:
    corpus = cfg.corpus()
    out = Path(cfg.out)
    names = [out / f"traj_{i:05d}.eqdy" for i in range(corpus.n_traj)] + [out / "provenance.json"]
    for p in names:
        _out_file(p, force)
    trajs = generate_corpus(corpus, threads)
    h = corpus.config_hash()
    for p, t in zip(names, trajs):
        write_trajectory(p, t, h)
    prov = {"corpus": asdict(corpus), "config_hash": h, "version": __version__,
            "files": [p.name for p in names[:-1]]}
    names[-1].write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n")
    return names


def load_corpus(data_dir: str, channel_rep: str) -> list[Trajectory]:
    d = Path(data_dir)
    files = sorted(d.glob("*.eqdy"))
    if not files:
        raise ConfigError(f"no .eqdy files in {data_dir!r}")
    trajs, hashes = [], set()
    for f in files:
        t, h = read_trajectory(f, channel_rep)
        trajs.append(t)
        hashes.add(h)
    if len(hashes) != 1:
        raise ConfigError(f"{data_dir} mixes files from {len(hashes)} corpus configurations")
    return trajs


def _take(ds: Dataset, n: int, seed: int) -> Dataset:
    if n <= 0 or len(ds) <= n:
        return ds
    return ds.subset(np.sort(np.random.default_rng(seed).choice(len(ds), n, replace=False)))


def _splits(cfg: RunConfig) -> dict:
    rep = "vector2" if cfg.kind == "velocity" else "scalar"
    splits = make_datasets(load_corpus(cfg.data, rep), cfg.l, cfg.horizon)
    splits["train"] = _take(splits["train"], cfg.max_train, cfg.seed + 1)
    splits["test"] = _take(splits["test"], cfg.max_test, cfg.seed + 3)
    return splits


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig, force: bool = False, log: Callable[[str], None] | None = None) -> Path:
    out = Path(cfg.out)
    ck_path = _out_file(out / CHECKPOINT_NAME, force)
    loss_path = _out_file(out / "loss.csv", force)
    splits = _splits(cfg)
    tc = cfg.train_config()
    k = cfg.k_accum
    if cfg.horizon < k:
        raise ConfigError(f"horizon {cfg.horizon} is shorter than k_accum {k}")
    start, prev_rows, opt = 0, [], None
    if cfg.resume:
        model, opt_state, meta = M.load_checkpoint(cfg.resume)
        if model.spec != cfg.model_spec():
            raise ConfigError("resume checkpoint was trained with a different model configuration")
        start = int(meta.get("epochs_done", 0))
        prev_rows = [tuple(r) for r in meta.get("loss_rows", [])]
        opt = M.Adam(model.parameters(), tc.lr, tc.beta1, tc.beta2, tc.eps)
        if opt_state is not None:
            opt.load_state(opt_state)
    else:
        model = M.build(cfg.model_spec(), cfg.seed)
    tr, va = splits["train"], splits["val"]
    try:
        res = M.train(model, tr.x, tr.y[:, :k], tc, va.x, va.y[:, :k], optimizer=opt, start_epoch=start, log=log)
    except M.DivergenceError as exc:
        raise NumericError(str(exc)) from exc
    rows = prev_rows + [tuple(r) for r in res.rows]
    meta = {"epochs_done": max(cfg.epochs, start), "seed": cfg.seed, "loss_rows": [list(r) for r in rows],
            "config": {k2: (list(v) if isinstance(v, tuple) else v) for k2, v in asdict(cfg).items()}}
    M.save_checkpoint(ck_path, model, res.optimizer, meta)
    loss_rows = []
    for epoch, tl, vl in rows:
        loss_rows.append(dict(metric="loss", split="train", transform="orig", step=epoch, value=tl, seed=cfg.seed))
        loss_rows.append(dict(metric="loss", split="val", transform="orig", step=epoch, value=vl, seed=cfg.seed))
    loss_path.write_text(metrics_csv(loss_rows))
    return ck_path


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def evaluate_rows(predict: Callable[[Dataset], np.ndarray], tests: dict, seed: int) -> list[dict]:
    """Per-step RMSE and conservation error plus whole-rollout scores for each test set."""
    rows = []
    for name, ds in tests.items():
        pred = predict(ds)
        if not np.all(np.isfinite(pred)):
            raise NumericError(f"non-finite predictions on the {name} test set")
        cons = thermal_energy_loss if ds.channel_rep == "scalar" else component_sum_loss
        cname = "energy_l1" if ds.channel_rep == "scalar" else "component_sum_l1"
        row = dict(split="test", transform=name, seed=seed)
        for s in range(pred.shape[1]):
            rows.append({**row, "metric": "rmse", "step": s + 1, "value": rmse(pred[:, s], ds.y[:, s])})
            rows.append({**row, "metric": cname, "step": s + 1, "value": cons(pred[:, s], ds.y[:, s])})
        rows.append({**row, "metric": "rmse", "step": "all", "value": rmse(pred, ds.y)})
        rows.append({**row, "metric": cname, "step": "all", "value": cons(pred, ds.y)})
        if pred.shape[1] >= 2:
            rows.append({**row, "metric": "ese", "step": "all",
                         "value": float(np.mean([ese(p, t) for p, t in zip(pred, ds.y)]))})
    return rows


def cmd_eval(cfg: RunConfig, force: bool = False) -> Path:
    out_path = _out_file(Path(cfg.out) / "metrics.csv", force)
    if not cfg.checkpoint:
        raise ConfigError("eval needs checkpoint=PATH (or checkpoint=@truth)")
    test = _splits(cfg)["test"]
    tests = {}
    for name in cfg.transforms:
        tests[name] = test if name == "orig" else make_transformed_testset(
            test, name, cfg.seed, rotation_step=cfg.rotation_step)
    if cfg.checkpoint == TRUTH_STUB:
        def predict(ds):
            return ds.y
    else:
        model, _, _ = M.load_checkpoint(cfg.checkpoint)

        def predict(ds):
            return M.predict_batch(model, ds.x, cfg.horizon)
    out_path.write_text(metrics_csv(evaluate_rows(predict, tests, cfg.seed)))
    return out_path


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def _sample_element(kind: str, rng: np.random.Generator, rotation_step: float) -> GroupElement:
    if kind == "UM":
        return GroupElement.uniform_motion(*rng.uniform(-1, 1, 2))
    if kind == "Mag":
        return GroupElement.magnitude(float(np.exp(rng.uniform(np.log(0.1), np.log(10.0)))))
    if kind == "Rot":
        step = int(round(2 * np.pi / rotation_step))
        return GroupElement.rotate(int(rng.integers(1, step)), step)
    if kind == "Scale":
        return GroupElement.scale(float(rng.uniform(0.5, 2.0)))
    raise ConfigError(f"cannot verify transform {kind!r}")


def verify_model(model: M.Model, kind: str, n_samples: int, seed: int, rotation_step: float = np.pi / 2) -> list[float]:
    """Relative equivariance error ``|g f(x) - f(g x)| / |f(g x)|`` on random inputs."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    spec = model.spec
    if kind == "UM" and spec.channel_rep != "vector2":
        raise ConfigError("uniform motion needs a vector-valued model (kind=velocity)")
    rng = np.random.default_rng(seed)
    shape = (spec.input_frames * spec.frame_channels, spec.grid, spec.grid)
    errs = []
    for _ in range(n_samples):
        x = rng.normal(size=shape)
        g = _sample_element(kind, rng, rotation_step)
        fx = M.forward(model, x).data
        gx = act_on_array(g, x, spec.channel_rep)
        fgx = M.forward(model, gx).data
        gfx = act_on_array(g, fx, spec.channel_rep)
        errs.append(rmse(gfx, fgx) / max(float(np.sqrt(np.mean(fgx ** 2))), 1e-300))
    return errs


def cmd_verify(cfg: RunConfig, stream=None) -> bool:
    stream = stream or sys.stdout
    if cfg.checkpoint:
        model, _, _ = M.load_checkpoint(cfg.checkpoint)
    else:
        model = M.build(cfg.model_spec(), cfg.seed)
    kinds = [t for t in cfg.transforms if t != "orig"]
    if not kinds:
        raise ConfigError("verify needs transforms=UM|Mag|Rot|Scale")
    ok = True
    for kind in kinds:
        errs = verify_model(model, kind, cfg.n_samples, cfg.seed, cfg.rotation_step)
        worst = max(errs)
        passed = worst <= cfg.tolerance
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {model.spec.symmetry} model under {kind}: "
              f"max relative EE {worst:.3e} (tolerance {cfg.tolerance:.1e}, {len(errs)} samples)", file=stream)
    return ok


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eqdyn", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {"generate": "simulate a heat or velocity corpus into EQDY files",
             "train": "train a model; writes model.eqdm and loss.csv",
             "eval": "score a checkpoint on original and transformed test sets",
             "verify": "measure equivariance error of a checkpoint or freshly built model"}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--out", help="output directory")
        p.add_argument("overrides", nargs="*", metavar="key=value")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, args.seed, args.out)
        if args.command == "generate":
            files = cmd_generate(cfg, args.threads, args.force)
            print(f"wrote {len(files) - 1} trajectories to {cfg.out}")
        elif args.command == "train":
            print(f"wrote {cmd_train(cfg, args.force, log=print)}")
        elif args.command == "eval":
            print(f"wrote {cmd_eval(cfg, args.force)}")
        else:
            return EXIT_OK if cmd_verify(cfg) else EXIT_VERIFY
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Train-and-evaluate protocol shared by the CLI, scripts and acceptance tests.

A run trains one model on the training split of a corpus and scores it
on the original test split plus its transformed copies.
"""

from __future__ import annotations

import time
from functools import lru_cache
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import models as M
from .dynamics import CorpusConfig, Dataset, generate_corpus, make_datasets, make_transformed_testset
from .metrics import component_sum_loss, rmse, thermal_energy_loss

SYMMETRY_TO_TRANSFORM = {"magnitude": "Mag", "rotation": "Rot", "scale": "Scale", "uniform_motion": "UM"}


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    input_frames: int = 10
    horizon: int = 5
    k_accum: int = 3
    stride: int = 1
    max_train: int = 600
    max_val: int = 200
    max_test: int = 200
    epochs: int = 8
    batch: int = 16
    lr: float = 1e-3
    schedule: str = "cosine"
    depth: int = 3
    width: int = 16
    widths: dict = field(default_factory=dict)  # per-symmetry overrides
    lifted_frames: int = 2
    scale_grid: tuple = (1 / 3, 3 ** (-2 / 3), 3 ** (-1 / 3), 1.0, 3 ** (1 / 3), 3 ** (2 / 3), 3.0)
    transforms: tuple = ("Mag", "Rot", "Scale")
    transform_seed: int = 1234

    def width_for(self, symmetry: str) -> int:
        """Explicit override, else the width matching the plain model's parameter count."""
        if symmetry in self.widths:
            return int(self.widths[symmetry])
        if symmetry == "none":
            return self.width
        target = M.build(self._spec("none", self.width), 0, zero=True).num_parameters()
        return _matched(self._spec(symmetry, self.width), target)

    def _spec(self, symmetry: str, width: int) -> M.ModelSpec:
        return M.ModelSpec(
            arch="shallow_cnn", symmetry=symmetry, depth=self.depth, width=width,
            input_frames=self.input_frames, grid=self.corpus.grid,
            channel_rep="vector2" if self.corpus.kind == "velocity" else "scalar",
            scale_grid=self.scale_grid, lifted_frames=self.lifted_frames)

    def model_spec(self, symmetry: str) -> M.ModelSpec:
        return self._spec(symmetry, self.width_for(symmetry))

    def train_config(self, seed: int) -> M.TrainConfig:
        return M.TrainConfig(lr=self.lr, k_accum=self.k_accum, epochs=self.epochs, batch=self.batch,
                             seed=seed, schedule=self.schedule)


@lru_cache(maxsize=None)
def _matched(spec: M.ModelSpec, target: int) -> int:
    return M.matched_width(spec, target)


def _take(ds: Dataset, n: int, seed: int) -> Dataset:
    if len(ds) <= n:
        return ds
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), n, replace=False))
    return ds.subset(idx)


@dataclass
class PreparedData:
    train: Dataset
    val: Dataset
    tests: dict  # transform name (incl. "orig") -> Dataset


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    trajs = generate_corpus(cfg.corpus)
    splits = make_datasets(trajs, cfg.input_frames, cfg.horizon, cfg.stride,
                           provenance={"corpus_hash": cfg.corpus.config_hash()})
    train = _take(splits["train"], cfg.max_train, cfg.corpus.seed + 1)
    val = _take(splits["val"], cfg.max_val, cfg.corpus.seed + 2)
    test = _take(splits["test"], cfg.max_test, cfg.corpus.seed + 3)
    tests = {"orig": test}
    for kind in cfg.transforms:
        tests[kind] = make_transformed_testset(test, kind, cfg.transform_seed)
    return PreparedData(train, val, tests)


def score(pred: np.ndarray, truth: np.ndarray, channel_rep: str) -> dict:
    """Rollout RMSE and conservation error over ``[N, horizon, C, H, W]`` arrays."""
    out = {"rmse": rmse(pred, truth)}
    if channel_rep == "scalar":
        out["energy_l1"] = thermal_energy_loss(pred, truth)
    else:
        out["energy_l1"] = component_sum_loss(pred, truth)
    out["rmse_step"] = [rmse(pred[:, s], truth[:, s]) for s in range(pred.shape[1])]
    return out


@dataclass
class RunResult:
    symmetry: str
    seed: int
    params: int
    seconds: float
    loss_rows: list
    scores: dict  # transform -> score dict
    model: M.Model | None = None


def run_one(cfg: ExperimentConfig, data: PreparedData, symmetry: str, seed: int,
            log: Callable[[str], None] | None = None) -> RunResult:
    spec = cfg.model_spec(symmetry)
    model = M.build(spec, seed)
    t0 = time.perf_counter()
    k = cfg.k_accum
    res = M.train(model, data.train.x, data.train.y[:, :k], cfg.train_config(seed),
                  data.val.x, data.val.y[:, :k], log=log)
    seconds = time.perf_counter() - t0
    scores = {}
    for name, ds in data.tests.items():
        pred = M.predict_batch(model, ds.x, cfg.horizon)
        scores[name] = score(pred, ds.y, ds.channel_rep)
    return RunResult(symmetry, seed, model.num_parameters(), seconds, res.rows, scores, model)


def run_suite(cfg: ExperimentConfig, symmetries: Sequence[str], seeds: Sequence[int],
              data: PreparedData | None = None, log: Callable[[str], None] | None = None) -> dict:
    """Results keyed by ``(symmetry, seed)``."""
    data = data or prepare_data(cfg)
    out = {}
    for seed in seeds:
        for sym in symmetries:
            r = run_one(cfg, data, sym, seed, log)
            if log:
                summary = ", ".join(f"{k}: {v['rmse']:.4g}/{v['energy_l1']:.4g}" for k, v in r.scores.items())
                log(f"[{sym} seed {seed}] {r.params} params, {r.seconds:.1f}s | rmse/energy {summary}")
            out[(sym, seed)] = r
    return out


def mean_score(results: dict, symmetry: str, transform: str, metric: str) -> float:
    vals = [r.scores[transform][metric] for (s, _), r in results.items() if s == symmetry]
    return float(np.mean(vals))


def heat_config(**overrides) -> ExperimentConfig:
    """Desk-scale heat experiment."""
    return replace(ExperimentConfig(), **overrides)


def velocity_config(**overrides) -> ExperimentConfig:
    """Uniform-motion experiment on the synthetic divergence-free velocity corpus."""
    corpus = CorpusConfig(kind="velocity", n_traj=60, seed=7)
    base = ExperimentConfig(corpus=corpus, transforms=("UM",))
    return replace(base, **overrides)

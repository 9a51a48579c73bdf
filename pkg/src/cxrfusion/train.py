"""Training loop, optimizers, and the hyperparameter sweep harness.

Everything here is deterministic under (config, data): epoch shuffles come
from keyed counter-based streams, optimizer math is plain float64, and model
selection picks the epoch with the highest validation macro AUROC (earliest
epoch on ties).  A non-finite loss aborts the run with a DivergenceError so
bad sweep points surface honestly instead of being clipped.
"""

from __future__ import annotations

import csv
import io
import itertools
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import rng
from .dataset import Sample
from .errors import ConfigError, DivergenceError, NumericError
from .labels import (MetaFeatureConfig, UncertainPolicy, build_target_matrix,
                     encode_metadata_batch, fit_imputation)
from .metrics import evaluate
from .model import (PRESETS, FusionModel, MetaBranchConfig, build_model, forward)
from .tensor import Tape, Tensor, masked_bce


@dataclass
class TrainConfig:
    preset: str = "plain-scaled"
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"                  # "adam" | "sgd-momentum"
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    policy: UncertainPolicy = UncertainPolicy.AS_NEGATIVE
    meta_features: Optional[Tuple[str, ...]] = ("age", "sex", "bmi")  # None = baseline
    meta_hidden: int = 12
    meta_out: int = 8

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; "
                              f"choose from {sorted(PRESETS)}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.meta_features is not None and len(self.meta_features) == 0:
            raise ConfigError("meta_features must be None (baseline) or non-empty")

    def to_dict(self) -> dict:
        d = vars(self) | {}
        d["policy"] = self.policy.value
        d["meta_features"] = None if self.meta_features is None else list(self.meta_features)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "policy" in d:
            d["policy"] = UncertainPolicy(d["policy"])
        mf = d.get("meta_features")
        if mf is not None:
            d["meta_features"] = tuple(mf)
        return cls(**d)


class SGDMomentum:
    """Heavy-ball SGD: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8 defaults)."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def make_optimizer(cfg: TrainConfig, model: FusionModel):
    if cfg.optimizer == "adam":
        return Adam(model.param_list(), cfg.learning_rate, cfg.adam_beta1,
                    cfg.adam_beta2, cfg.adam_eps)
    return SGDMomentum(model.param_list(), cfg.learning_rate, cfg.momentum)


@dataclass
class Batch:
    images: np.ndarray                  # (B, 1, H, W)
    metas: Optional[np.ndarray]         # (B, d) or None for baseline
    targets: np.ndarray                 # (B, 14)
    masks: np.ndarray                   # (B, 14)

    def __len__(self) -> int:
        return self.images.shape[0]


def prepare_arrays(samples: Sequence[Sample], meta_cfg: Optional[MetaFeatureConfig],
                   policy: UncertainPolicy) -> Batch:
    if not samples:
        raise ConfigError("empty sample list")
    images = np.stack([s.image for s in samples])
    metas = None
    if meta_cfg is not None:
        metas = encode_metadata_batch([s.metadata for s in samples], meta_cfg)
    targets, masks = build_target_matrix([s.states for s in samples], policy)
    return Batch(images, metas, targets, masks)


def build_meta_feature_config(feature_names: Sequence[str],
                              train_samples: Sequence[Sample]) -> MetaFeatureConfig:
    """Feature config fitted on the training split: imputation medians plus
    sorted category lists for any categorical features."""
    records = [s.metadata for s in train_samples]
    categories = {}
    for f in ("race", "insurance"):
        if f in feature_names:
            values = sorted({getattr(r, f) for r in records
                             if getattr(r, f) is not None})
            categories[f] = tuple(values)
    return MetaFeatureConfig(features=tuple(feature_names), categories=categories,
                             impute=fit_imputation(records))


def train_step(model: FusionModel, batch: Batch, optimizer) -> float:
    """One optimizer update on the mean masked BCE over the batch."""
    if len(batch) == 0:
        raise ConfigError("empty batch")
    model.zero_grads()
    tape = Tape()
    try:
        # overflow here is reported as DivergenceError; silence the warning
        with np.errstate(over="ignore", invalid="ignore"):
            images = Tensor(batch.images)
            v = Tensor(batch.metas) if batch.metas is not None else None
            logits = forward(model, images, v, tape=tape)
            loss = masked_bce(logits, batch.targets, batch.masks, tape=tape)
            tape.backward(loss)
    except NumericError as exc:
        raise DivergenceError(
            f"non-finite value during training step (learning rate too high?): {exc}"
        ) from exc
    optimizer.step()
    return loss.item()


@dataclass
class RunLogRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_macro_auroc: Optional[float]
    seconds: float


@dataclass
class RunLog:
    rows: List[RunLogRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "val_macro_auroc",
                         "seconds"])
        for r in self.rows:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss),
                             "" if r.val_macro_auroc is None else repr(r.val_macro_auroc),
                             f"{r.seconds:.3f}"])
        return buf.getvalue()


def _check_patient_disjoint(train: Sequence[Sample], val: Sequence[Sample]) -> None:
    overlap = {s.patient_id for s in train} & {s.patient_id for s in val}
    if overlap:
        raise ConfigError(
            f"train/val share {len(overlap)} patients (e.g. {sorted(overlap)[0]})")


def fit(cfg: TrainConfig, train_samples: Sequence[Sample],
        val_samples: Sequence[Sample]) -> Tuple[FusionModel, RunLog]:
    """Train and return the checkpoint with the best validation macro AUROC.

    Ties go to the earliest epoch.  Deterministic under (cfg, data) up to the
    wall-clock column of the run log.
    """
    cfg.validate()
    if not train_samples or not val_samples:
        raise ConfigError("train and val splits must be non-empty")
    _check_patient_disjoint(train_samples, val_samples)

    meta_cfg = None
    meta_branch = None
    if cfg.meta_features is not None:
        meta_cfg = build_meta_feature_config(cfg.meta_features, train_samples)
        meta_branch = MetaBranchConfig(input_dim=meta_cfg.width(),
                                       hidden_dim=cfg.meta_hidden,
                                       output_dim=cfg.meta_out)
    model = build_model(PRESETS[cfg.preset], meta_branch, seed=cfg.seed,
                        meta_features=meta_cfg)
    optimizer = make_optimizer(cfg, model)

    train_arrays = prepare_arrays(train_samples, meta_cfg, cfg.policy)
    val_arrays = prepare_arrays(val_samples, meta_cfg, cfg.policy)
    n = len(train_arrays)

    log = RunLog()
    best_model = model.copy()
    best_auroc = -np.inf
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = rng.stream(cfg.seed, "shuffle", epoch).permutation(n)
        losses = []
        weights = []
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            batch = Batch(train_arrays.images[idx],
                          None if train_arrays.metas is None else train_arrays.metas[idx],
                          train_arrays.targets[idx], train_arrays.masks[idx])
            losses.append(train_step(model, batch, optimizer))
            weights.append(len(idx))
        train_loss = float(np.average(losses, weights=weights))

        try:
            with np.errstate(over="ignore", invalid="ignore"):
                val_logits = _forward_arrays(model, val_arrays)
                val_loss = masked_bce(Tensor(val_logits), val_arrays.targets,
                                      val_arrays.masks).item()
                val_report = evaluate(model, val_samples, policy=cfg.policy)
        except NumericError as exc:
            raise DivergenceError(
                f"non-finite values while evaluating epoch {epoch}: {exc}") from exc
        val_auroc = val_report.macro_auroc
        log.rows.append(RunLogRow(epoch, train_loss, val_loss, val_auroc,
                                  time.perf_counter() - t0))
        if val_auroc is not None and val_auroc > best_auroc:
            best_auroc = val_auroc
            best_model = model.copy()
    return best_model, log


def _forward_arrays(model: FusionModel, arrays: Batch,
                    batch_size: int = 256) -> np.ndarray:
    out = []
    for lo in range(0, len(arrays), batch_size):
        v = None if arrays.metas is None else Tensor(arrays.metas[lo:lo + batch_size])
        out.append(forward(model, Tensor(arrays.images[lo:lo + batch_size]), v).data)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# sweep harness
# ---------------------------------------------------------------------------

@dataclass
class SweepSpec:
    """Grid or seeded random search over the sweep dimensions.

    ``meta_features`` entries are tuples of feature names; the empty tuple
    means the image-only baseline.  Random sampling is without replacement
    from the full grid (all of it when n_trials >= grid size).
    """

    strategy: str = "grid"                  # "grid" | "random"
    n_trials: int = 0
    seed: int = 0
    learning_rates: Tuple[float, ...] = (1e-3,)
    batch_sizes: Tuple[int, ...] = (32,)
    meta_features: Tuple[Tuple[str, ...], ...] = (("age", "sex", "bmi"),)
    meta_dims: Tuple[Tuple[int, int], ...] = ((12, 8),)

    def validate(self) -> None:
        if self.strategy not in ("grid", "random"):
            raise ConfigError(f"unknown sweep strategy {self.strategy!r}")
        if self.strategy == "random" and self.n_trials < 1:
            raise ConfigError("random strategy requires n_trials >= 1")
        for dim, name in ((self.learning_rates, "learning_rates"),
                          (self.batch_sizes, "batch_sizes"),
                          (self.meta_features, "meta_features"),
                          (self.meta_dims, "meta_dims")):
            if not dim:
                raise ConfigError(f"sweep dimension {name} is empty")

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "n_trials": self.n_trials,
                "seed": self.seed,
                "learning_rates": list(self.learning_rates),
                "batch_sizes": list(self.batch_sizes),
                "meta_features": [list(f) for f in self.meta_features],
                "meta_dims": [list(d) for d in self.meta_dims]}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        d = dict(d)
        for key, cast in (("learning_rates", float), ("batch_sizes", int)):
            if key in d:
                d[key] = tuple(cast(x) for x in d[key])
        if "meta_features" in d:
            d["meta_features"] = tuple(tuple(f) for f in d["meta_features"])
        if "meta_dims" in d:
            d["meta_dims"] = tuple((int(h), int(o)) for h, o in d["meta_dims"])
        return cls(**d)

    def grid(self) -> List[Tuple[float, int, Tuple[str, ...], Tuple[int, int]]]:
        return list(itertools.product(self.learning_rates, self.batch_sizes,
                                      self.meta_features, self.meta_dims))

    def trial_configs(self) -> List[Tuple[float, int, Tuple[str, ...], Tuple[int, int]]]:
        cells = self.grid()
        if self.strategy == "grid":
            return cells
        k = min(self.n_trials, len(cells))
        order = rng.stream(self.seed, "sweep").permutation(len(cells))[:k]
        return [cells[i] for i in order]


@dataclass
class TrialResult:
    trial_id: int
    learning_rate: float
    batch_size: int
    meta_features: Tuple[str, ...]
    meta_hidden: int
    meta_out: int
    best_val_auroc: Optional[float]
    status: str                          # "ok" | "failed"
    log: Optional[RunLog] = None


@dataclass
class SweepResult:
    trials: List[TrialResult]
    winner: Optional[TrainConfig]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["trial_id", "learning_rate", "batch_size",
                         "meta_features", "meta_hidden", "meta_out",
                         "best_val_auroc", "status"])
        for t in self.trials:
            writer.writerow([
                t.trial_id, repr(t.learning_rate), t.batch_size,
                "+".join(t.meta_features) if t.meta_features else "none",
                t.meta_hidden, t.meta_out,
                "" if t.best_val_auroc is None else repr(t.best_val_auroc),
                t.status])
        return buf.getvalue()


def _trial_config(base: TrainConfig, cell) -> TrainConfig:
    lr, bs, feats, (hidden, out) = cell
    return replace(base, learning_rate=lr, batch_size=bs,
                   meta_features=tuple(feats) if feats else None,
                   meta_hidden=hidden, meta_out=out)


def run_trial(base: TrainConfig, cell, train_samples, val_samples) -> Tuple[Optional[float], str, Optional[RunLog]]:
    cfg = _trial_config(base, cell)
    try:
        _, log = fit(cfg, train_samples, val_samples)
    except DivergenceError:
        return None, "failed", None
    best = max((r.val_macro_auroc for r in log.rows
                if r.val_macro_auroc is not None), default=None)
    return best, "ok", log


def sweep(spec: SweepSpec, base: TrainConfig, train_samples: Sequence[Sample],
          val_samples: Sequence[Sample], jobs: int = 1) -> SweepResult:
    """Run every trial configuration and rank by best validation macro AUROC.

    Diverged trials are recorded as failed rows; the sweep continues.  With
    jobs > 1 trials run in separate processes; the table order is by trial id
    either way.
    """
    spec.validate()
    base.validate()
    cells = spec.trial_configs()
    results: List[TrialResult] = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_trial, base, cell, train_samples, val_samples)
                       for cell in cells]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [run_trial(base, cell, train_samples, val_samples)
                    for cell in cells]
    for tid, (cell, (best, status, log)) in enumerate(zip(cells, outcomes)):
        lr, bs, feats, (hidden, out) = cell
        results.append(TrialResult(tid, lr, bs, tuple(feats), hidden, out,
                                   best, status, log))
    ok = [t for t in results if t.status == "ok" and t.best_val_auroc is not None]
    winner = None
    if ok:
        best_trial = max(ok, key=lambda t: (t.best_val_auroc, -t.trial_id))
        winner = _trial_config(base, (best_trial.learning_rate, best_trial.batch_size,
                                      best_trial.meta_features,
                                      (best_trial.meta_hidden, best_trial.meta_out)))
    return SweepResult(trials=results, winner=winner)

"""Ablation-curve AUC as a model-selection signal: normalized AUC, an
early-stopping monitor and hyperparameter-sweep ranking/subselection.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng as rngs
from .errors import ConfigError
from .nn.intervention import ClampMode, UnitRef
from .nn.model import Model
from .nn.train import EpochRecord, TrainConfig, train
from .perturb import CumulativeCurve, count_grid, cumulative_ablation_curve, resolve_scope, scope_units
from .selectivity import DEGENERATE, Degenerate, is_degenerate, spearman

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AucValue:
    value: float
    meta: dict = field(default_factory=dict, compare=False)

    def __float__(self):
        return self.value


def trapezoid(y, x) -> float:
    y, x = np.asarray(y, float), np.asarray(x, float)
    return float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2.0)


def normalized_auc(curve: CumulativeCurve) -> AucValue | Degenerate:
    """Trapezoidal area under the mean curve over the fraction axis, divided
    by the unablated accuracy.  A flat curve scores exactly 1."""
    if len(curve.counts) < 2:
        raise ConfigError("AUC needs a curve with at least 2 points")
    mean = curve.mean
    base = float(mean[0])
    if base == 0.0:
        return DEGENERATE
    value = trapezoid(mean / base, curve.fractions)
    return AucValue(value, dict(curve.meta))


# --- early stopping -----------------------------------------------------------------

@dataclass
class MonitorRecord:
    epoch: int
    train_loss: float
    test_loss: float
    auc: float


@dataclass(frozen=True)
class ProbeConfig:
    """A fixed, cheap ablation-curve measurement repeated during training."""

    n_orderings: int = 3
    n_units: int | None = None
    n_points: int | None = 9
    scope: object = "all"
    clamp_mode: str = "zero"
    seed: int = 0


class AucProbe:
    def __init__(self, model: Model, config: ProbeConfig = ProbeConfig()):
        self.config = config
        units = scope_units(model, resolve_scope(model, config.scope))
        if config.n_units is not None and config.n_units < len(units):
            pick = rngs.stream(config.seed, "probe-units").choice(len(units), config.n_units, replace=False)
            units = [units[i] for i in sorted(pick)]
        self.units: list[UnitRef] = units
        self.counts = count_grid(len(units), config.n_points)

    def __call__(self, model: Model, dataset) -> float:
        curve = cumulative_ablation_curve(model, dataset, n_orderings=self.config.n_orderings,
                                          clamp_mode=self.config.clamp_mode, seed=self.config.seed,
                                          counts=self.counts, units=self.units)
        auc = normalized_auc(curve)
        return float("nan") if is_degenerate(auc) else auc.value


def suggest_stop(aucs: Sequence[float], delta: float = 0.02, patience: int = 2) -> int | None:
    """Index of the probe at which the stop rule fires, or None.

    The rule fires once AUC has sat at or below (running max - delta) for
    ``patience`` consecutive probes.
    """
    if patience < 1:
        raise ConfigError("patience must be >= 1")
    best = -np.inf
    run = 0
    for i, a in enumerate(aucs):
        best = max(best, a)
        if a <= best - delta:
            run += 1
            if run >= patience:
                return i
        else:
            run = 0
    return None


@dataclass
class MonitorResult:
    records: list[MonitorRecord]
    stop_epoch: int | None
    history: list[EpochRecord]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "test_loss", "auc"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.test_loss), repr(r.auc)])
        return buf.getvalue()


def read_monitor_csv(text: str) -> list[MonitorRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if rows[0] != ["epoch", "train_loss", "test_loss", "auc"]:
        raise ConfigError("not a monitor CSV")
    return [MonitorRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows[1:]]


def monitor_training(model: Model, train_set, test_set, config: TrainConfig, *, probe_every: int = 10,
                     probe: ProbeConfig = ProbeConfig(), delta: float = 0.02, patience: int = 2,
                     stop_early: bool = False) -> MonitorResult:
    """Train while probing the ablation AUC on the *training* split every
    ``probe_every`` epochs (and at the final epoch).

    Probes only evaluate, so they never change the model or the training
    trajectory.  With ``stop_early`` training halts when the rule fires;
    otherwise the run completes and the suggested stop epoch is reported.
    """
    if probe_every < 1:
        raise ConfigError("probe_every must be >= 1")
    auc_probe = AucProbe(model, probe)
    records: list[MonitorRecord] = []
    state = {"stop": None}

    def callback(m, rec: EpochRecord):
        if rec.epoch % probe_every and rec.epoch != config.epochs:
            return False
        auc = auc_probe(m, train_set)
        records.append(MonitorRecord(rec.epoch, rec.train_loss, rec.test_loss, auc))
        if state["stop"] is None:
            idx = suggest_stop([r.auc for r in records], delta, patience)
            if idx is not None:
                state["stop"] = records[idx].epoch
        return stop_early and state["stop"] is not None

    result = train(model, train_set, config, test=test_set, callback=callback)
    return MonitorResult(records, state["stop"], result.history)


# --- sweeps -------------------------------------------------------------------------

@dataclass
class SweepResult:
    config_id: str
    config: TrainConfig
    test_acc: float
    test_loss: float
    auc: float
    repeat: int = 0


SWEEP_COLUMNS = ["config_id", "repeat", "lr", "batch_size", "dropout", "batchnorm", "test_acc", "test_loss", "auc"]


def sweep_csv(results: Sequence[SweepResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in results:
        c = r.config
        w.writerow([r.config_id, r.repeat, repr(c.lr), c.batch_size, repr(float(c.dropout or 0.0)),
                    int(bool(c.batchnorm)), repr(r.test_acc), repr(r.test_loss), repr(r.auc)])
    return buf.getvalue()


def read_sweep_csv(text: str) -> list[SweepResult]:
    rows = list(csv.reader(io.StringIO(text)))
    if rows[0] != SWEEP_COLUMNS:
        raise ConfigError("not a sweep CSV")
    out = []
    for r in rows[1:]:
        cfg = TrainConfig(lr=float(r[2]), batch_size=int(r[3]), dropout=float(r[4]) or None,
                          batchnorm=bool(int(r[5])))
        out.append(SweepResult(r[0], cfg, float(r[6]), float(r[7]), float(r[8]), int(r[1])))
    return out


def config_id(cfg: TrainConfig) -> str:
    return f"lr={cfg.lr:g},bs={cfg.batch_size},do={cfg.dropout or 0:g},bn={int(bool(cfg.batchnorm))}"


def grid_configs(base: TrainConfig, lrs: Sequence[float], batch_sizes: Sequence[int],
                 dropouts: Sequence[float | None] = (None,), batchnorms: Sequence[bool] = (False,)) -> list[TrainConfig]:
    return [TrainConfig(lr=lr, batch_size=bs, epochs=base.epochs, seed=base.seed, dropout=do, batchnorm=bn)
            for lr, bs, do, bn in itertools.product(lrs, batch_sizes, dropouts, batchnorms)]


def run_sweep(configs: Sequence[TrainConfig], build_model: Callable[[TrainConfig, int], Model], train_set,
              test_set, *, repeats: int = 2, probe: ProbeConfig = ProbeConfig(n_units=None, n_points=21),
              seed: int = 0, jobs: int = 1) -> list[SweepResult]:
    """Train every (config, repeat) and score test accuracy/loss and the
    ablation AUC on the training split."""
    from .nn.model import evaluate

    tasks = []
    for cfg in configs:
        for rep in range(repeats):
            run_seed = rngs.derive_seed(seed, f"sweep/{config_id(cfg)}/{rep}")
            tasks.append((cfg, rep, run_seed))

    def run(task):
        cfg, rep, run_seed = task
        run_cfg = TrainConfig(cfg.lr, cfg.batch_size, cfg.epochs, run_seed, cfg.dropout, cfg.batchnorm)
        model = build_model(run_cfg, run_seed)
        train(model, train_set, run_cfg)
        te = evaluate(model, test_set)
        auc = AucProbe(model, probe)(model, train_set)
        log.info("sweep %s rep %d: test_acc=%.4f auc=%.4f", config_id(cfg), rep, te.accuracy, auc)
        return SweepResult(config_id(cfg), cfg, te.accuracy, te.loss, auc, rep)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, tasks))
    return [run(t) for t in tasks]


def _auc_order(results: Sequence[SweepResult]) -> list[int]:
    return sorted(range(len(results)), key=lambda i: (-results[i].auc, results[i].config_id, results[i].repeat))


def rank_by_auc(results: Sequence[SweepResult]) -> tuple[list[SweepResult], float | Degenerate]:
    if len(results) < 2:
        raise ConfigError("ranking needs at least 2 results")
    order = _auc_order(results)
    rho = spearman([r.auc for r in results], [r.test_acc for r in results])
    return [results[i] for i in order], rho


@dataclass
class SubselectionSummary:
    subset_size: int
    n_trials: int
    hits: dict[int, float]
    gap_mean: float
    gap_std: float

    def to_json(self) -> str:
        return json.dumps({"subset_size": self.subset_size, "n_trials": self.n_trials,
                           "hits": {str(k): v for k, v in self.hits.items()},
                           "gap_mean": self.gap_mean, "gap_std": self.gap_std}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> SubselectionSummary:
        d = json.loads(text)
        return cls(d["subset_size"], d["n_trials"], {int(k): v for k, v in d["hits"].items()},
                   d["gap_mean"], d["gap_std"])


def subset_outcome(results: Sequence[SweepResult], subset: Sequence[int], k_list: Sequence[int]):
    """Which top-k sets the AUC pick falls into, and its accuracy gap to the best.

    A pick is in the top-k when fewer than k members of the subset have
    strictly higher test accuracy.
    """
    sub = [results[i] for i in subset]
    pick = sub[_auc_order(sub)[0]]
    accs = np.array([r.test_acc for r in sub])
    better = int(np.sum(accs > pick.test_acc))
    return {k: better < k for k in k_list}, float(accs.max() - pick.test_acc)


def subselection_experiment(results: Sequence[SweepResult], subset_size: int, n_trials: int,
                            k_list: Sequence[int], seed: int = 0) -> SubselectionSummary:
    n = len(results)
    if not 1 <= subset_size <= n:
        raise ConfigError(f"subset_size must lie in [1, {n}]")
    if any(k < 1 or k > subset_size for k in k_list):
        raise ConfigError("k values must lie in [1, subset_size]")
    g = rngs.stream(seed, "subselect")
    hits = {k: 0 for k in k_list}
    gaps = []
    for _ in range(n_trials):
        subset = g.choice(n, size=subset_size, replace=False)
        hit, gap = subset_outcome(results, subset, k_list)
        for k in k_list:
            hits[k] += hit[k]
        gaps.append(gap)
    gaps = np.array(gaps)
    return SubselectionSummary(subset_size, n_trials, {k: hits[k] / n_trials for k in k_list},
                               float(gaps.mean()), float(gaps.std()))

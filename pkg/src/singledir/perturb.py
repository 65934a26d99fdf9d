"""Perturbation analyses: cumulative ablation curves and noise sweeps."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import rng as rngs
from .errors import ConfigError, PlanError, PreconditionError
from .nn.intervention import ClampMode, InterventionPlan, LayerStats, NoiseSpec, UnitRef, UnitStats
from .nn.model import Model, evaluate, forward

__all__ = [
    "UnitRef", "UnitStats", "LayerStats", "InterventionPlan", "ClampMode", "NoiseSpec",
    "compute_unit_stats", "resolve_scope", "scope_units", "count_grid", "CumulativeCurve",
    "cumulative_ablation_curve", "NoiseSweep", "noise_sweep", "default_noise_scales",
    "ablate_single",
]


def resolve_scope(model: Model, scope: str | Sequence[int] | None) -> list[int]:
    """Turn a scope description into ReLU layer indices.

    Accepts ``None``/``"all"`` (every hidden layer), ``"conv"``, ``"lastN"``
    (the last N hidden layers) or an explicit list of layer indices.
    """
    hidden = model.hidden_layers()
    if scope is None or scope == "all":
        layers = hidden
    elif scope == "conv":
        layers = model.conv_hidden_layers()
    elif isinstance(scope, str) and scope.startswith("last"):
        try:
            k = int(scope[4:])
        except ValueError:
            raise ConfigError(f"bad layer scope {scope!r}") from None
        layers = hidden[-k:] if k > 0 else []
    elif isinstance(scope, str):
        raise ConfigError(f"bad layer scope {scope!r}")
    else:
        layers = [int(i) for i in scope]
        for i in layers:
            if not 0 <= i < len(model.layers):
                raise PlanError(f"scope layer {i} out of range (model has {len(model.layers)} layers)")
    if not layers:
        raise ConfigError("layer scope is empty")
    return list(layers)


def scope_units(model: Model, layers: Iterable[int]) -> list[UnitRef]:
    return [UnitRef(layer, u) for layer in layers for u in range(model.width(layer))]


# --- statistics ------------------------------------------------------------------

def compute_unit_stats(model: Model, dataset, layers: Sequence[int] | None = None,
                       batch_size: int = 500) -> UnitStats:
    """Eval-mode mean/variance of every unit in ``layers`` over ``dataset``.

    Feature-map statistics pool examples and spatial positions; per-element
    means are kept for mean-clamping.  Units whose activation never varies get
    exactly their constant value as mean and zero variance.
    """
    if len(dataset) == 0:
        raise PreconditionError("cannot compute unit statistics on an empty dataset")
    layers = resolve_scope(model, layers)
    acc = {layer: None for layer in layers}
    for start in range(0, len(dataset), batch_size):
        tr = forward(model, dataset.examples[start:start + batch_size])
        for layer in layers:
            a = tr.activations[layer + 1]
            axes = (0,) if a.ndim == 2 else (0, 2, 3)
            cnt = a.size // a.shape[1]
            b_mean = a.mean(axis=axes)
            shape = (1, -1) + (1,) * (a.ndim - 2)
            b_m2 = ((a - b_mean.reshape(shape)) ** 2).sum(axis=axes)
            b_min, b_max = a.min(axis=axes), a.max(axis=axes)
            b_elem = a.sum(axis=0) if a.ndim == 4 else None
            st = acc[layer]
            if st is None:
                acc[layer] = [cnt, b_mean, b_m2, b_min, b_max, b_elem, len(a)]
                continue
            n_a, mean_a, m2_a, mn, mx, elem, n_ex = st
            n = n_a + cnt
            delta = b_mean - mean_a
            mean = mean_a + delta * (cnt / n)
            m2 = m2_a + b_m2 + delta ** 2 * (n_a * cnt / n)
            acc[layer] = [n, mean, m2, np.minimum(mn, b_min), np.maximum(mx, b_max),
                          None if elem is None else elem + b_elem, n_ex + len(a)]
    out = UnitStats()
    for layer, (n, mean, m2, mn, mx, elem, n_ex) in acc.items():
        var = np.maximum(m2 / n, 0.0)
        const = mn == mx
        mean = np.where(const, mn, mean)
        var = np.where(const, 0.0, var)
        out.layers[layer] = LayerStats(mean=mean, var=var,
                                       element_mean=None if elem is None else elem / n_ex)
    return out


# --- cumulative ablation ---------------------------------------------------------

def count_grid(n_units: int, n_points: int | None = None) -> np.ndarray:
    """Ablation counts 0..K, optionally thinned to ``n_points`` evenly spaced counts."""
    if n_points is None or n_points >= n_units + 1:
        return np.arange(n_units + 1)
    if n_points < 2:
        raise ConfigError("an ablation curve needs at least 2 points")
    return np.unique(np.rint(np.linspace(0, n_units, n_points)).astype(int))


@dataclass
class CumulativeCurve:
    counts: np.ndarray
    n_units: int
    accuracies: np.ndarray  # [n_orderings, n_points]
    losses: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / self.n_units

    @property
    def mean(self) -> np.ndarray:
        return self.accuracies.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.accuracies.std(axis=0)

    @property
    def baseline(self) -> float:
        return float(self.accuracies[0, 0])

    def accuracy_at(self, fraction: float) -> float:
        """Mean accuracy at ``fraction`` ablated, linearly interpolated."""
        return float(np.interp(fraction, self.fractions, self.mean))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n_ord = self.accuracies.shape[0]
        w.writerow(["count", "fraction", "mean_acc", "std_acc"] + [f"ordering_{i}" for i in range(n_ord)])
        for j, c in enumerate(self.counts):
            w.writerow([int(c), repr(float(self.fractions[j])), repr(float(self.mean[j])),
                        repr(float(self.std[j]))] + [repr(float(v)) for v in self.accuracies[:, j]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, meta: dict | None = None) -> CumulativeCurve:
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if header[:4] != ["count", "fraction", "mean_acc", "std_acc"]:
            raise ConfigError("not a cumulative-curve CSV")
        counts = np.array([int(r[0]) for r in body])
        acc = np.array([[float(v) for v in r[4:]] for r in body]).T
        meta = dict(meta or {})
        n_units = meta.get("n_units")
        if n_units is None:
            frac = float(body[-1][1])
            n_units = int(round(counts[-1] / frac)) if frac > 0 else int(counts[-1])
        return cls(counts, int(n_units), acc, None, meta)


def _curve_row(model, dataset, units, counts, mode, stats, order_seed, baseline):
    perm = rngs.stream(order_seed, "ordering").permutation(len(units))
    ordered = [units[i] for i in perm]
    acc = np.empty(len(counts))
    loss = np.empty(len(counts))
    for j, c in enumerate(counts):
        if c == 0:
            ev = baseline
        else:
            ev = evaluate(model, dataset, InterventionPlan.clamp(ordered[:c], mode, stats))
        acc[j], loss[j] = ev.accuracy, ev.loss
    return acc, loss


def cumulative_ablation_curve(model: Model, dataset, layer_scope=None, n_orderings: int = 10,
                              clamp_mode: ClampMode | str = ClampMode.ZERO, seed: int = 0, *,
                              counts: Sequence[int] | None = None, n_points: int | None = None,
                              units: Sequence[UnitRef] | None = None, stats: UnitStats | None = None,
                              split: str = "train", jobs: int = 1) -> CumulativeCurve:
    """Accuracy as units are clamped cumulatively in random orders.

    Units of all scoped layers are pooled; ordering ``i`` is a permutation
    drawn from a stream keyed by ``(seed, i)``, so orderings can run in any
    order or concurrently with identical results.  Each point re-runs the full
    forward pass.  ``counts``/``n_points`` thin the count axis (default: every
    count).  Mean-clamping needs ``stats`` (training-set statistics); if
    omitted they are computed on ``dataset``.
    """
    if n_orderings < 1:
        raise ConfigError("n_orderings must be >= 1")
    mode = ClampMode(clamp_mode)
    if units is None:
        layers = resolve_scope(model, layer_scope)
        units = scope_units(model, layers)
    else:
        units = list(units)
        layers = sorted({u.layer for u in units})
        InterventionPlan.clamp(units).compile(model)
    if not units:
        raise ConfigError("no units to ablate")
    if mode is ClampMode.MEAN and stats is None:
        stats = compute_unit_stats(model, dataset, layers)
    k = len(units)
    grid = np.asarray(counts if counts is not None else count_grid(k, n_points), dtype=int)
    if grid[0] != 0 or np.any(np.diff(grid) <= 0) or grid[-1] > k:
        raise ConfigError("ablation counts must start at 0, increase strictly and not exceed the unit count")
    baseline = evaluate(model, dataset)
    seeds = [rngs.derive_seed(seed, f"ordering/{i}") for i in range(n_orderings)]

    def run(s):
        return _curve_row(model, dataset, units, grid, mode, stats, s, baseline)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run, seeds))
    else:
        rows = [run(s) for s in seeds]
    meta = {"clamp_mode": mode.value, "split": split, "layers": [int(x) for x in layers],
            "n_orderings": n_orderings, "seed": seed, "n_units": k}
    return CumulativeCurve(grid, k, np.array([r[0] for r in rows]), np.array([r[1] for r in rows]), meta)


# --- noise -----------------------------------------------------------------------

def default_noise_scales() -> np.ndarray:
    return np.logspace(-2, 2, 17)


@dataclass
class NoiseSweep:
    scales: np.ndarray
    accuracies: np.ndarray  # [n_scales, n_runs]
    meta: dict = field(default_factory=dict)

    @property
    def mean(self) -> np.ndarray:
        return self.accuracies.mean(axis=1)

    @property
    def std(self) -> np.ndarray:
        return self.accuracies.std(axis=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scale", "mean_acc", "std_acc"] + [f"run_{i}" for i in range(self.accuracies.shape[1])])
        for j, s in enumerate(self.scales):
            w.writerow([repr(float(s)), repr(float(self.mean[j])), repr(float(self.std[j]))]
                       + [repr(float(v)) for v in self.accuracies[j]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, meta: dict | None = None) -> NoiseSweep:
        rows = list(csv.reader(io.StringIO(text)))
        if rows[0][:3] != ["scale", "mean_acc", "std_acc"]:
            raise ConfigError("not a noise-sweep CSV")
        body = rows[1:]
        return cls(np.array([float(r[0]) for r in body]),
                   np.array([[float(v) for v in r[3:]] for r in body]), dict(meta or {}))


def noise_sweep(model: Model, dataset, scales: Sequence[float], unit_stats: UnitStats,
                n_runs: int = 10, seed: int = 0, *, layer_scope=None, split: str = "train",
                jobs: int = 1) -> NoiseSweep:
    """Accuracy under Gaussian noise of variance ``scale * var(unit)`` on every scoped unit.

    Run ``r`` reuses the same noise stream at every scale, so the sweep over
    scales is a common-random-numbers comparison.
    """
    scales = np.asarray(scales, dtype=np.float64)
    if n_runs < 1:
        raise ConfigError("n_runs must be >= 1")
    if scales.size == 0 or np.any(scales < 0) or np.any(np.diff(scales) < 0):
        raise ConfigError("noise scales must be non-negative and sorted ascending")
    layers = resolve_scope(model, layer_scope if layer_scope is not None else sorted(unit_stats.layers))
    missing = [i for i in layers if i not in unit_stats]
    if missing:
        raise PlanError(f"unit statistics missing for layers {missing}")
    baseline = evaluate(model, dataset)
    run_seeds = [rngs.derive_seed(seed, f"noise-run/{r}") for r in range(n_runs)]

    def cell(args):
        s, r = args
        if s == 0.0:
            return baseline.accuracy
        plan = InterventionPlan(stats=unit_stats, noise=NoiseSpec(float(s), run_seeds[r], tuple(layers)))
        return evaluate(model, dataset, plan, seed=run_seeds[r]).accuracy

    jobs_list = [(s, r) for s in scales for r in range(n_runs)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            vals = list(pool.map(cell, jobs_list))
    else:
        vals = [cell(a) for a in jobs_list]
    acc = np.array(vals).reshape(len(scales), n_runs)
    meta = {"split": split, "layers": [int(x) for x in layers], "n_runs": n_runs, "seed": seed}
    return NoiseSweep(scales, acc, meta)


# --- single-unit ablation ---------------------------------------------------------

def ablate_single(model: Model, dataset, unit: UnitRef, clamp_mode: ClampMode | str = ClampMode.ZERO,
                  stats: UnitStats | None = None, baseline=None) -> tuple[float, float]:
    """(accuracy delta, loss delta) of clamping one unit, intervened minus baseline."""
    if baseline is None:
        baseline = evaluate(model, dataset)
    ev = evaluate(model, dataset, InterventionPlan.clamp([unit], clamp_mode, stats))
    return ev.accuracy - baseline.accuracy, ev.loss - baseline.loss

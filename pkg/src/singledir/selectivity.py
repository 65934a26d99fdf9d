"""Per-unit class selectivity, mutual information, filter norms and importance,
plus the rank-correlation summaries relating them.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, PreconditionError
from .nn.intervention import ClampMode, UnitRef, UnitStats
from .nn.model import Model, evaluate, forward
from .perturb import ablate_single, compute_unit_stats, resolve_scope


class Degenerate:
    """Marker for a correlation that is undefined (zero rank variance)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "DEGENERATE"

    def __bool__(self):
        return False


DEGENERATE = Degenerate()


def is_degenerate(value) -> bool:
    return value is DEGENERATE


# --- scalar activations ------------------------------------------------------------

def unit_activations(model: Model, dataset, layers: Sequence[int], batch_size: int = 500) -> dict[int, np.ndarray]:
    """Eval-mode activation of every unit per example, ``[N, units]``.

    Feature maps are averaged over their spatial elements first.
    """
    out = {layer: [] for layer in layers}
    for start in range(0, len(dataset), batch_size):
        tr = forward(model, dataset.examples[start:start + batch_size])
        for layer in layers:
            a = tr.activations[layer + 1]
            out[layer].append(a.mean(axis=(2, 3)) if a.ndim == 4 else a)
    return {layer: np.concatenate(v) for layer, v in out.items()}


# --- class selectivity --------------------------------------------------------------

@dataclass
class ClassConditionalStats:
    means: dict[int, np.ndarray]  # layer -> [units, C]

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.means[layer]


def class_means_from_activations(acts: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise PreconditionError(f"class {int(missing[0])} has no examples")
    sums = np.zeros((n_classes, acts.shape[1]))
    np.add.at(sums, labels, acts)
    return (sums / counts[:, None]).T


def class_conditional_means(model: Model, dataset, layers=None, acts=None) -> ClassConditionalStats:
    layers = resolve_scope(model, layers)
    counts = np.bincount(dataset.labels, minlength=dataset.n_classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise PreconditionError(f"class {int(missing[0])} has no examples in {dataset.name or 'dataset'}")
    if acts is None:
        acts = unit_activations(model, dataset, layers)
    return ClassConditionalStats({layer: class_means_from_activations(acts[layer], dataset.labels,
                                                                      dataset.n_classes)
                                  for layer in layers})


def selectivity_index(means: np.ndarray) -> np.ndarray:
    """(mu_max - mu_rest) / (mu_max + mu_rest) per row of ``[units, C]`` class means.

    ``mu_rest`` is the mean over the other C-1 classes; a zero denominator
    (e.g. a dead unit) gives 0.
    """
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    c = means.shape[1]
    if c < 2:
        raise ConfigError("selectivity needs at least two classes")
    mu_max = means.max(axis=1)
    mu_rest = (means.sum(axis=1) - mu_max) / (c - 1)
    # mu_rest <= mu_max exactly; rounding in the sum can push it a hair above
    num = np.maximum(mu_max - mu_rest, 0.0)
    den = mu_max + mu_rest
    out = np.zeros(len(means))
    ok = den != 0
    out[ok] = num[ok] / den[ok]
    return out


# --- mutual information -------------------------------------------------------------

def quantile_bins(x: np.ndarray, n_bins: int) -> np.ndarray:
    """Equal-frequency bin index per sample; ties always share a bin."""
    if n_bins < 2:
        raise ConfigError("n_bins must be >= 2")
    x = np.asarray(x, dtype=np.float64)
    edges = np.unique(np.quantile(x, np.linspace(0, 1, n_bins + 1)[1:-1], method="inverted_cdf"))
    return np.searchsorted(edges, x, side="left")


def mi_from_table(table: np.ndarray) -> float:
    """Plug-in mutual information (bits) of a joint count/probability table."""
    p = np.asarray(table, dtype=np.float64)
    total = p.sum()
    if total <= 0:
        return 0.0
    p = p / total
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(max(0.0, np.sum(p[nz] * np.log2(p[nz] / (px @ py)[nz]))))


def plugin_mi(x: np.ndarray, labels: np.ndarray, n_classes: int, n_bins: int = 32) -> float:
    bins = quantile_bins(x, n_bins)
    table = np.zeros((bins.max() + 1, n_classes))
    np.add.at(table, (bins, labels), 1.0)
    return mi_from_table(table)


def mutual_information(model: Model, dataset, n_bins: int = 32, layers=None, acts=None) -> dict[int, np.ndarray]:
    """Per-unit MI in bits between the binned activation and the class label."""
    layers = resolve_scope(model, layers)
    if acts is None:
        acts = unit_activations(model, dataset, layers)
    return {layer: np.array([plugin_mi(acts[layer][:, u], dataset.labels, dataset.n_classes, n_bins)
                             for u in range(acts[layer].shape[1])])
            for layer in layers}


# --- filter norms ---------------------------------------------------------------------

def filter_l1_norms(model: Model, layers=None) -> dict[int, np.ndarray]:
    """L1 norm of each unit's incoming weights (biases excluded).

    Keys are the analysis (ReLU) layers; the weights come from the dense or
    conv layer that produces them.
    """
    out = {}
    for layer in resolve_scope(model, layers):
        src = model.producer(layer)
        if src is None:
            raise ConfigError(f"layer {layer} has no producing dense/conv layer")
        w = model.params[src]["weight"]
        out[layer] = np.abs(w).sum(axis=0) if model.layers[src].kind == "dense" \
            else np.abs(w).reshape(w.shape[0], -1).sum(axis=1)
    return out


# --- rank correlation -------------------------------------------------------------------

def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys):
    """Spearman's rho as the Pearson correlation of average ranks.

    Returns :data:`DEGENERATE` when either argument has no rank variance.
    """
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 2:
        raise ConfigError("spearman needs two 1-D sequences of equal length >= 2")
    rx, ry = average_ranks(xs), average_ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    sxx, syy = float(rx @ rx), float(ry @ ry)
    if sxx == 0.0 or syy == 0.0:
        return DEGENERATE
    return float(np.clip((rx @ ry) / np.sqrt(sxx * syy), -1.0, 1.0))


def _fmt_corr(v):
    return "degenerate" if is_degenerate(v) else v


# --- report ---------------------------------------------------------------------------

REPORT_COLUMNS = ("layer", "unit", "selectivity", "mutual_info_bits", "loss_delta", "acc_delta", "l1_norm")


@dataclass
class SelectivityReport:
    layer: np.ndarray
    unit: np.ndarray
    selectivity: np.ndarray
    mutual_info_bits: np.ndarray
    loss_delta: np.ndarray
    acc_delta: np.ndarray
    l1_norm: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.layer)

    @property
    def layers(self) -> list[int]:
        return sorted(set(int(v) for v in self.layer))

    def column(self, name: str) -> np.ndarray:
        if name not in REPORT_COLUMNS:
            raise ConfigError(f"unknown report column {name!r}")
        return getattr(self, name)

    def select(self, mask) -> SelectivityReport:
        return SelectivityReport(*(getattr(self, c)[mask] for c in REPORT_COLUMNS), meta=dict(self.meta))

    @classmethod
    def concat(cls, reports: Sequence[SelectivityReport]) -> SelectivityReport:
        return cls(*(np.concatenate([getattr(r, c) for r in reports]) for c in REPORT_COLUMNS))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for i in range(len(self)):
            w.writerow([int(self.layer[i]), int(self.unit[i])]
                       + [repr(float(getattr(self, c)[i])) for c in REPORT_COLUMNS[2:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> SelectivityReport:
        rows = list(csv.reader(io.StringIO(text)))
        if tuple(rows[0]) != REPORT_COLUMNS:
            raise ConfigError("not a selectivity-report CSV")
        body = rows[1:]
        cols = [np.array([int(r[0]) for r in body]), np.array([int(r[1]) for r in body])]
        cols += [np.array([float(r[k]) for r in body]) for k in range(2, len(REPORT_COLUMNS))]
        return cls(*cols)


def build_report(model: Model, dataset, n_bins: int = 32, clamp_mode: ClampMode | str = ClampMode.ZERO,
                 layers=None, stats: UnitStats | None = None) -> SelectivityReport:
    """One record per unit combining selectivity, MI, L1 norm and ablation deltas.

    ``dataset`` is the analysis split (the test split for importance).  Mean
    clamping uses ``stats`` when given, otherwise statistics of ``dataset``.
    """
    layers = resolve_scope(model, layers)
    mode = ClampMode(clamp_mode)
    if mode is ClampMode.MEAN and stats is None:
        stats = compute_unit_stats(model, dataset, layers)
    acts = unit_activations(model, dataset, layers)
    ccm = class_conditional_means(model, dataset, layers, acts)
    mi = mutual_information(model, dataset, n_bins, layers, acts)
    l1 = filter_l1_norms(model, layers)
    baseline = evaluate(model, dataset)
    cols = {c: [] for c in REPORT_COLUMNS}
    for layer in layers:
        width = model.width(layer)
        sel = selectivity_index(ccm[layer])
        for u in range(width):
            da, dl = ablate_single(model, dataset, UnitRef(layer, u), mode, stats, baseline)
            cols["layer"].append(layer)
            cols["unit"].append(u)
            cols["selectivity"].append(sel[u])
            cols["mutual_info_bits"].append(mi[layer][u])
            cols["loss_delta"].append(dl)
            cols["acc_delta"].append(da)
            cols["l1_norm"].append(l1[layer][u])
    meta = {"n_bins": n_bins, "clamp_mode": mode.value, "layers": layers, "n_examples": len(dataset)}
    return SelectivityReport(*(np.asarray(cols[c]) for c in REPORT_COLUMNS), meta=meta)


# --- correlation summaries -----------------------------------------------------------

@dataclass
class LayerCorrelation:
    layer: int
    n_units: int
    spearman: float | Degenerate
    slope: float | None
    intercept: float | None


def _regression(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if len(x) < 2 or sxx == 0.0:
        return None, None
    slope = float(xc @ (y - y.mean()) / sxx)
    return slope, float(y.mean() - slope * x.mean())


def per_layer_correlation(report: SelectivityReport, x: str = "selectivity",
                          y: str = "loss_delta") -> list[LayerCorrelation]:
    out = []
    xs, ys = report.column(x), report.column(y)
    for layer in report.layers:
        m = report.layer == layer
        rho = spearman(xs[m], ys[m]) if m.sum() >= 2 else DEGENERATE
        slope, icpt = _regression(xs[m], ys[m])
        out.append(LayerCorrelation(layer, int(m.sum()), rho, slope, icpt))
    return out


def correlation_summary(report: SelectivityReport) -> dict:
    pairs = {"selectivity_vs_loss": ("selectivity", "loss_delta"),
             "mi_vs_loss": ("mutual_info_bits", "loss_delta"),
             "selectivity_vs_l1": ("selectivity", "l1_norm")}
    pooled = {k: _fmt_corr(spearman(report.column(a), report.column(b))) if len(report) >= 2 else "degenerate"
              for k, (a, b) in pairs.items()}
    per_layer = []
    by_pair = {k: per_layer_correlation(report, a, b) for k, (a, b) in pairs.items()}
    for i, layer in enumerate(report.layers):
        entry = {"layer": layer, "n_units": by_pair["selectivity_vs_loss"][i].n_units}
        for k in pairs:
            lc = by_pair[k][i]
            entry[k] = _fmt_corr(lc.spearman)
            entry[f"{k}_slope"] = lc.slope
            entry[f"{k}_intercept"] = lc.intercept
        per_layer.append(entry)
    return {"pooled": pooled, "per_layer": per_layer}


def summary_json(summary: dict) -> str:
    return json.dumps(summary, indent=2) + "\n"


def selectivity_depth_histograms(report: SelectivityReport, bin_edges=None) -> dict[int, np.ndarray]:
    """Histogram of selectivity per layer; the last bin is closed on the right."""
    edges = np.linspace(0, 1, 11) if bin_edges is None else np.asarray(bin_edges, dtype=np.float64)
    if np.any(np.diff(edges) <= 0) or edges[0] > 0 or edges[-1] < 1:
        raise ConfigError("bin edges must ascend and cover [0, 1]")
    return {layer: np.histogram(report.selectivity[report.layer == layer], bins=edges)[0]
            for layer in report.layers}

"""Command-line front end: ``singledir {train,ablate,noise,selectivity,sweep,monitor}``.

Exit codes: 0 ok, 2 configuration error, 3 data or I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import rng as rngs
from .data import (DATA_DIR_ENV, CorruptionSpec, Dataset, corrupt_labels, corruption_sidecar, load_source,
                   split_counts, synthetic_blobs)
from .errors import ConfigError, DataFormatError, SingleDirError
from .modelsel import (ProbeConfig, grid_configs, monitor_training, normalized_auc, rank_by_auc, run_sweep,
                       subselection_experiment, sweep_csv)
from .nn import Model, TrainConfig, convnet, mlp, train
from .nn import checkpoint as ckpt
from .perturb import compute_unit_stats, cumulative_ablation_curve, default_noise_scales, noise_sweep
from .selectivity import build_report, correlation_summary, is_degenerate, selectivity_depth_histograms

log = logging.getLogger("singledir")

METRICS_COLUMNS = ["epoch", "train_loss", "train_acc", "test_loss", "test_acc"]


# --- shared plumbing ----------------------------------------------------------------

def build_data(cfg: dict) -> tuple[Dataset, Dataset, dict | None]:
    """Training split (possibly corrupted), clean test split and corruption sidecar."""
    seed = cfg["seed"]
    if cfg["source"] == "blobs":
        pool = synthetic_blobs(cfg["n_per_class"], cfg["classes"], cfg["dim"], cfg["separation"],
                               seed=rngs.derive_seed(seed, "blobs"))
    else:
        pool = load_source(cfg["source"], cfg["data_dir"])
    n = len(pool)
    n_test = cfg["n_test"] if cfg["n_test"] is not None else int(math.floor(0.2 * n + 0.5))
    n_train = cfg["n_train"] if cfg["n_train"] is not None else n - n_test
    if n_train + n_test > n:
        raise ConfigError(f"data.n_train: {n_train} training + {n_test} test examples exceed the "
                          f"{n} available in {cfg['source']}")
    train_set, test_set = split_counts(pool, [n_train, n_test], seed=rngs.derive_seed(seed, "data-split"))
    sidecar = None
    if cfg["corruption"] > 0:
        cseed = cfg["corruption_seed"] if cfg["corruption_seed"] is not None else seed
        spec = CorruptionSpec(cfg["corruption"], cseed)
        corrupted = corrupt_labels(train_set, spec)
        sidecar = corruption_sidecar(train_set, corrupted, spec)
        train_set = corrupted
    return train_set, test_set, sidecar


def build_model(cfg: dict, input_shape, n_classes: int, seed: int) -> Model:
    if cfg["arch"] == "mlp":
        return mlp(int(np.prod(input_shape)), cfg["hidden"], n_classes, dropout=cfg["dropout"],
                   batchnorm=cfg["batchnorm"], seed=seed)
    if len(input_shape) != 3:
        raise ConfigError(f"model.arch: convnet needs [C, H, W] inputs, got shape {list(input_shape)}")
    return convnet(input_shape, cfg["channels"], cfg["strides"], n_classes, dense_hidden=cfg["dense_hidden"],
                   dropout=cfg["dropout"], batchnorm=cfg["batchnorm"], seed=seed)


def fit_inputs(ds: Dataset, model: Model) -> Dataset:
    """Reshape examples to the model's input shape (e.g. flatten images for an MLP)."""
    shape = tuple(model.input_shape)
    if tuple(ds.examples.shape[1:]) == shape:
        return ds
    if int(np.prod(ds.examples.shape[1:])) != int(np.prod(shape)):
        raise DataFormatError(f"data.source: examples of shape {list(ds.examples.shape[1:])} do not fit "
                              f"a model expecting {list(shape)}")
    return Dataset(ds.examples.reshape((len(ds),) + shape), ds.labels, ds.n_classes, ds.name)


def train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    tc = TrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                     seed=cfg["seed"] if seed is None else seed, dropout=cfg["dropout"] or None,
                     batchnorm=cfg["batchnorm"])
    tc.validate()
    return tc


def probe_config(cfg: dict) -> ProbeConfig:
    return ProbeConfig(n_orderings=cfg["probe_orderings"], n_units=cfg["probe_units"] or None,
                       n_points=cfg["probe_points"], scope=cfg["scope"], clamp_mode=cfg["clamp"],
                       seed=cfg["seed"])


def reproducible(cfg: dict) -> dict:
    """What produced a model: seed plus the model, data and train sections."""
    doc = cfgmod.nested(cfg)
    return {k: doc[k] for k in ("seed", "model", "data", "train")}


def write_json(path: Path, doc) -> None:
    ckpt.atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def stamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def metrics_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.train_acc),
                    "" if r.test_loss is None else repr(r.test_loss),
                    "" if r.test_acc is None else repr(r.test_acc)])
    return buf.getvalue()


def flag_values(args: argparse.Namespace) -> dict:
    return {name: cfgmod.parse_flag(cfgmod.KEYS[name], raw)
            for name, raw in vars(args).items() if name in cfgmod.KEYS}


def experiment_config(args, base: dict | None = None, command_defaults: dict | None = None) -> dict:
    """Defaults < command defaults < checkpoint record < --config file < flags."""
    layers = dict(command_defaults or {})
    layers.update(base or {})
    if getattr(args, "config", None):
        layers.update(cfgmod.read_toml(args.config))
    return cfgmod.resolve(layers, flag_values(args))


class Analysis:
    """A loaded checkpoint with the datasets it was trained on."""

    def __init__(self, args, command_defaults: dict | None = None):
        self.path = Path(args.checkpoint)
        self.model, self.train_cfg, meta = ckpt.load(self.path)
        self.digest = ckpt.file_hash(self.path)
        record = meta["extra"].get("experiment") if meta["extra"] else None
        base = cfgmod.flatten(record) if record else {}
        defaults = dict(command_defaults or {})
        defaults["output_dir"] = str(self.path.parent)
        self.cfg = experiment_config(args, base, defaults)
        self.train_set, self.test_set, _ = build_data(self.cfg)
        self.train_set = fit_inputs(self.train_set, self.model)
        self.test_set = fit_inputs(self.test_set, self.model)
        self.out = Path(self.cfg["output_dir"])

    @property
    def dataset(self) -> Dataset:
        return self.train_set if self.cfg["split"] == "train" else self.test_set

    def provenance(self) -> dict:
        return {"checkpoint": str(self.path), "checkpoint_sha256": self.digest, "split": self.cfg["split"],
                "n_examples": len(self.dataset), "seed": self.cfg["seed"], "created": stamp()}


# --- commands -----------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = experiment_config(args)
    out = Path(cfg["output_dir"])
    train_set, test_set, sidecar = build_data(cfg)
    tc = train_config(cfg)
    model = build_model(cfg, train_set.examples.shape[1:], train_set.n_classes, seed=cfg["seed"])
    train_set, test_set = fit_inputs(train_set, model), fit_inputs(test_set, model)
    result = train(model, train_set, tc, test=test_set, target_train_acc=cfg["target_acc"])
    epoch = result.history[-1].epoch if result.history else 0
    digest = ckpt.save(out / "model.ckpt.json", model, tc, seed=cfg["seed"], epoch=epoch,
                       extra={"experiment": reproducible(cfg)})
    ckpt.atomic_write_text(out / "metrics.csv", metrics_csv(result.history))
    files = ["model.ckpt.json", "metrics.csv"]
    if sidecar is not None:
        write_json(out / "corruption.json", sidecar)
        files.append("corruption.json")
    write_json(out / "run.json", {"command": "train", "checkpoint_sha256": digest, "epochs_run": epoch,
                                  "files": files, "n_train": len(train_set), "n_test": len(test_set),
                                  "created": stamp()})
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"epoch {last.epoch} train_acc {last.train_acc:.4f} test_acc {last.test_acc:.4f}")
    print(f"wrote {out / 'model.ckpt.json'}")
    return 0


def cmd_ablate(args) -> int:
    an = Analysis(args)
    cfg = an.cfg
    stats = None
    if cfg["clamp"] == "mean":
        stats = compute_unit_stats(an.model, an.train_set, cfg["scope"])
    curve = cumulative_ablation_curve(an.model, an.dataset, cfg["scope"], cfg["orderings"], cfg["clamp"],
                                      cfg["seed"], n_points=cfg["points"], stats=stats, split=cfg["split"],
                                      jobs=cfg["jobs"])
    auc = normalized_auc(curve)
    stem = f"ablation-{cfg['clamp']}-{cfg['split']}"
    ckpt.atomic_write_text(an.out / f"{stem}.csv", curve.to_csv())
    side = an.provenance()
    side.update(curve.meta)
    side.update({"clamp_mode": cfg["clamp"], "scope": cfg["scope"],
                 "ordering_seeds": [rngs.derive_seed(cfg["seed"], f"ordering/{i}") for i in range(cfg["orderings"])],
                 "counts": [int(c) for c in curve.counts],
                 "auc": None if is_degenerate(auc) else auc.value})
    write_json(an.out / f"{stem}.json", side)
    print("degenerate" if is_degenerate(auc) else repr(auc.value))
    return 0


def cmd_noise(args) -> int:
    an = Analysis(args)
    cfg = an.cfg
    scales = cfg["scales"] if cfg["scales"] is not None else default_noise_scales()
    stats = compute_unit_stats(an.model, an.train_set, cfg["scope"])
    sweep = noise_sweep(an.model, an.dataset, scales, stats, cfg["runs"], cfg["seed"],
                        layer_scope=cfg["scope"], split=cfg["split"], jobs=cfg["jobs"])
    stem = f"noise-{cfg['split']}"
    ckpt.atomic_write_text(an.out / f"{stem}.csv", sweep.to_csv())
    side = an.provenance()
    side.update(sweep.meta)
    side.update({"scales": [float(s) for s in scales], "stats_split": "train",
                 "run_seeds": [rngs.derive_seed(cfg["seed"], f"noise-run/{r}") for r in range(cfg["runs"])]})
    write_json(an.out / f"{stem}.json", side)
    for s, m in zip(sweep.scales, sweep.mean):
        print(f"{s:g} {m:.4f}")
    return 0


def cmd_selectivity(args) -> int:
    an = Analysis(args, command_defaults={"split": "test"})
    cfg = an.cfg
    stats = compute_unit_stats(an.model, an.train_set, cfg["scope"]) if cfg["clamp"] == "mean" else None
    report = build_report(an.model, an.dataset, cfg["bins"], cfg["clamp"], cfg["scope"], stats)
    summary = correlation_summary(report)
    stem = f"selectivity-{cfg['split']}"
    ckpt.atomic_write_text(an.out / f"{stem}.csv", report.to_csv())
    hist = selectivity_depth_histograms(report)
    doc = {"correlations": summary,
           "depth_histograms": {"bin_edges": np.linspace(0, 1, 11).tolist(),
                                "counts": {str(k): v.tolist() for k, v in hist.items()}},
           "meta": {**an.provenance(), **report.meta, "n_units": len(report)}}
    write_json(an.out / f"{stem}.json", doc)
    print(f"pooled spearman(selectivity, loss_delta): {summary['pooled']['selectivity_vs_loss']}")
    return 0


def cmd_sweep(args) -> int:
    cfg = experiment_config(args)
    out = Path(cfg["output_dir"])
    train_set, test_set, _ = build_data(cfg)
    base = train_config(cfg)
    template = build_model(cfg, train_set.examples.shape[1:], train_set.n_classes, seed=cfg["seed"])
    train_set, test_set = fit_inputs(train_set, template), fit_inputs(test_set, template)
    configs = grid_configs(base, cfg["lrs"], cfg["batch_sizes"], [base.dropout], [base.batchnorm])

    def factory(tc: TrainConfig, seed: int) -> Model:
        return build_model(cfg, template.input_shape, train_set.n_classes, seed)

    probe = probe_config(cfg)
    results = run_sweep(configs, factory, train_set, test_set, repeats=cfg["repeats"], probe=probe,
                        seed=cfg["seed"], jobs=cfg["jobs"])
    ckpt.atomic_write_text(out / "sweep.csv", sweep_csv(results))
    ranked, rho = rank_by_auc(results) if len(results) >= 2 else (results, None)
    rho_out = "degenerate" if rho is None or is_degenerate(rho) else rho
    side = {"command": "sweep", "experiment": reproducible(cfg), "spearman_auc_test_acc": rho_out,
            "ranking": [[r.config_id, r.repeat] for r in ranked], "created": stamp()}
    if cfg["subselect"] is not None:
        summ = subselection_experiment(results, cfg["subselect"], cfg["trials"], cfg["topk"],
                                       seed=rngs.derive_seed(cfg["seed"], "subselection"))
        ckpt.atomic_write_text(out / "subselection.json", summ.to_json())
        for k, v in summ.hits.items():
            print(f"top-{k} hit rate: {v:.4f}")
    write_json(out / "sweep.json", side)
    print(f"spearman(auc, test_acc): {rho_out}")
    return 0


def cmd_monitor(args) -> int:
    cfg = experiment_config(args)
    out = Path(cfg["output_dir"])
    train_set, test_set, _ = build_data(cfg)
    tc = train_config(cfg)
    model = build_model(cfg, train_set.examples.shape[1:], train_set.n_classes, seed=cfg["seed"])
    train_set, test_set = fit_inputs(train_set, model), fit_inputs(test_set, model)
    res = monitor_training(model, train_set, test_set, tc, probe_every=cfg["probe_every"],
                           probe=probe_config(cfg), delta=cfg["delta"], patience=cfg["patience"])
    ckpt.atomic_write_text(out / "monitor.csv", res.to_csv())
    ckpt.atomic_write_text(out / "metrics.csv", metrics_csv(res.history))
    test_losses = [h.test_loss for h in res.history]
    best = res.history[int(np.argmin(test_losses))].epoch if res.history else None
    write_json(out / "monitor.json", {"stop_epoch": res.stop_epoch, "min_test_loss_epoch": best,
                                      "epochs": tc.epochs, "delta": cfg["delta"], "patience": cfg["patience"],
                                      "probe_every": cfg["probe_every"], "experiment": reproducible(cfg),
                                      "created": stamp()})
    print(f"stop_epoch: {'none' if res.stop_epoch is None else res.stop_epoch}")
    return 0


# --- argument parsing ---------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML experiment config; flags override its values")
    for key in cfgmod.SCHEMA:
        names = [key.flag] + (["--out"] if key.name == "output_dir" else [])
        p.add_argument(*names, dest=key.name, default=argparse.SUPPRESS, metavar=key.kind.upper(),
                       help=f"{key.help} [{key.field}]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="singledir",
        description="Single-direction reliance experiments: training, ablation, noise, selectivity and "
                    f"model selection.  Default data directory: ${DATA_DIR_ENV} or ./data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "train": (cmd_train, "train a model; writes model.ckpt.json and metrics.csv", False),
        "ablate": (cmd_ablate, "cumulative ablation curve; prints the normalized AUC", True),
        "noise": (cmd_noise, "accuracy under Gaussian activation noise", True),
        "selectivity": (cmd_selectivity, "per-unit selectivity, MI and ablation importance", True),
        "sweep": (cmd_sweep, "hyperparameter sweep ranked by ablation AUC", False),
        "monitor": (cmd_monitor, "train while probing ablation AUC; suggests a stop epoch", False),
    }
    for name, (fn, help_text, needs_ckpt) in commands.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        if needs_ckpt:
            p.add_argument("checkpoint", help="model.ckpt.json written by 'train'")
        _add_config_flags(p)
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SingleDirError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .augmentation import AugmentationConfigError, AugmentationSpec, KeyAnnotation
from .config import ConfigError, ExperimentConfig
from .datasets import (
    DatasetError,
    expand_training_set,
    load_dataset,
    prepare_dataset,
    save_dataset,
)
from .evaluation import evaluate, similarity_report, sweep, timing_report
from .models import SequentialRecommender, TrainingDivergedError
from .synthetic import make_desk_interactions, write_interactions
from .tta import TtaConfig

logger = logging.getLogger("seqtta")

DATASET_FILE = "dataset.json"
MODEL_FILE = "model.json"


class UsageError(Exception):
    """Bad command-line usage or missing input file (exit code 2)."""


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _require(path, what):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _out(cfg):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(cfg):
    return load_dataset(_require(Path(cfg.output_dir) / DATASET_FILE, "dataset file"))


def _load_model(cfg):
    return SequentialRecommender.load(_require(Path(cfg.output_dir) / MODEL_FILE,
                                               "checkpoint"))


def _keys(cfg):
    if cfg.dataset.keys_path is None:
        return None
    return KeyAnnotation.load(_require(cfg.dataset.keys_path, "key annotation file"))


# -- commands ------------------------------------------------------------------

def cmd_prepare(cfg, args):
    if cfg.dataset.path is None:
        raise ConfigError("dataset.path is required for prepare")
    path = _require(cfg.dataset.path, "interaction file")
    catalog, split, stats = prepare_dataset(path, cfg.dataset.k_core, cfg.dataset.max_len,
                                            cfg.dataset.format)
    out = _out(cfg)
    save_dataset(out / DATASET_FILE, catalog, split, stats, cfg.echo())
    _dump(out / "stats.json", stats)
    logger.info("prepared %d users, %d items", stats["users"], stats["items"])
    return 0


def cmd_train(cfg, args):
    _, split, _ = _load_split(cfg)
    spec = cfg.train_augmentation.operator
    if spec is not None:
        spec = AugmentationSpec.from_dict(spec)
        rng = np.random.default_rng([cfg.seed, 1])
        before = len(split.training_sequences())
        split = expand_training_set(split, spec, rng, n_variants=cfg.train_augmentation.n_variants)
        logger.info("training set expanded from %d to %d sequences", before,
                    len(split.training_sequences()))
    model = SequentialRecommender(**cfg.model_params(), verbose=int(args.verbose)).fit(split)
    model.verbose = 0
    out = _out(cfg)
    model.save(out / MODEL_FILE)
    rows = []
    valid = dict(model.valid_curve_)
    for epoch, loss in enumerate(model.loss_curve_):
        rows.append({"epoch": epoch, "loss": repr(float(loss)),
                     "valid_ndcg@10": repr(float(valid[epoch])) if epoch in valid else ""})
    _write_csv(out / "loss_curve.csv", rows)
    logger.info("trained %d epochs, best epoch %d", model.n_epochs_run_, model.best_epoch_)
    return 0


def _write_report(out, stem, report, cfg, extra=None):
    body = {"metrics": report.metrics_dict(), "config": cfg.echo()}
    if extra:
        body.update(extra)
    _dump(out / f"{stem}.json", body)
    _write_csv(out / f"{stem}.csv", [report.metrics_dict()])
    # wall-clock numbers live in a sidecar so the report itself is reproducible
    _dump(out / f"{stem}_timing.json", {"inference_minutes": report.inference_minutes,
                                        "num_users": report.num_users})


def cmd_eval(cfg, args):
    mode = getattr(args, "mode", "base")
    _, split, _ = _load_split(cfg)
    model = _load_model(cfg)
    ev = cfg.evaluation
    tta = cfg.tta_config() if mode == "tta" else None
    report, details = evaluate(model, split, tta=tta, keys=_keys(cfg) if tta else None,
                               exclude_seen=ev.exclude_seen, chunk_size=ev.chunk_size,
                               parallel=cfg.parallel, top_k=ev.top_k)
    out = _out(cfg)
    stem = "tta_report" if tta else "base_report"
    extra = {"operator": tta.spec.to_dict(), "m": tta.m} if tta else None
    _write_report(out, stem, report, cfg, extra)
    with open(out / f"{stem.split('_')[0]}_predictions.jsonl", "w", encoding="utf-8") as fh:
        for user, ranked in zip(split.users, details["top_k"]):
            fh.write(json.dumps({"user": user, "top_k": ranked.tolist()}) + "\n")
    logger.info("%s HR@10 %.4f NDCG@10 %.4f", report.label, report.hr[10], report.ndcg[10])
    return 0


def cmd_tta_eval(cfg, args):
    args.mode = "tta"
    return cmd_eval(cfg, args)


def cmd_sweep(cfg, args):
    _, split, _ = _load_split(cfg)
    model = _load_model(cfg)
    axis, grid = cfg.sweep.axis, cfg.sweep_grid()
    if axis == "noise_interval" and cfg.tta.operator is None:
        base = TtaConfig(AugmentationSpec.tnoise_from_pair(*grid[0]), cfg.tta.m,
                         cfg.tta.include_original, cfg.tta.aggregate_space, cfg.seed)
    else:
        base = cfg.tta_config()
    result = sweep(model, split, axis, grid, base, keys=_keys(cfg), parallel=cfg.parallel)
    out = _out(cfg)
    result.write_csv(out / f"sweep_{axis}.csv")
    result.write_plot_data(out / f"sweep_{axis}.dat")
    _dump(out / f"sweep_{axis}.json", {"axis": axis, "rows": result.rows(),
                                       "config": cfg.echo()})
    return 0


def cmd_analyze_similarity(cfg, args):
    _, split, _ = _load_split(cfg)
    model = _load_model(cfg)
    ops = cfg.analysis.similarity_operators
    if not ops:
        raise ConfigError("analysis.similarity_operators is empty")
    keys = _keys(cfg)
    rows = []
    for op in ops:
        tta = TtaConfig(AugmentationSpec.from_dict(op), cfg.analysis.m, global_seed=cfg.seed)
        rows.append(similarity_report(model, split, tta, keys=keys,
                                      max_users=cfg.analysis.max_users).to_dict())
    out = _out(cfg)
    _write_csv(out / "similarity.csv", rows)
    _dump(out / "similarity.json", {"rows": rows, "config": cfg.echo()})
    return 0


def cmd_analyze_timing(cfg, args):
    _, split, _ = _load_split(cfg)
    model = _load_model(cfg)
    an = cfg.analysis
    if not an.timing_operators:
        raise ConfigError("analysis.timing_operators is empty")
    sizes = an.vocab_sizes or [model.num_items_, 4 * model.num_items_]
    if len(sizes) < 2:
        raise ConfigError("analysis.vocab_sizes needs at least two sizes")
    report = timing_report(model, split, an.timing_operators, sizes, m=an.m,
                           repeats=an.repeats, max_users=an.max_users, seed=cfg.seed)
    out = _out(cfg)
    _write_csv(out / "timing.csv", report.rows())
    _dump(out / "timing.json", {"rows": report.rows(), "ratios": report.ratios(),
                                "substitute_queries": report.substitute_queries,
                                "num_users": report.num_users, "m": report.m})
    return 0


def cmd_synth(cfg, args):
    rows = make_desk_interactions(n_users=args.users, n_items=args.items, seed=cfg.seed)
    write_interactions(args.path, rows)
    logger.info("wrote %d interactions to %s", len(rows), args.path)
    return 0


COMMANDS = {
    "prepare": (cmd_prepare, "build the canonical dataset file from raw interactions"),
    "train": (cmd_train, "train a model and write a checkpoint"),
    "eval": (cmd_eval, "evaluate the checkpoint without (or with --mode tta) augmentation"),
    "tta-eval": (cmd_tta_eval, "evaluate with test-time augmentation"),
    "sweep": (cmd_sweep, "evaluate over a grid of one TTA setting"),
    "analyze-similarity": (cmd_analyze_similarity, "cosine similarity of augmented inputs"),
    "analyze-timing": (cmd_analyze_timing, "TTA inference time at several catalog sizes"),
    "synth": (cmd_synth, "write a synthetic interaction csv"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="seqtta", description="Test-time augmentation for sequential "
                                                "recommenders.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML or JSON experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--parallel", type=int, help="evaluation worker threads")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--mode", choices=("base", "tta"), default="base")
        if name == "synth":
            p.add_argument("path")
            p.add_argument("--users", type=int, default=3000)
            p.add_argument("--items", type=int, default=600)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.config is None and args.command != "synth":
            raise UsageError("--config is required")
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output_dir = args.out
        if args.parallel is not None:
            cfg.parallel = args.parallel
        cfg.validate()
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command][0](cfg, args)
    except (UsageError, ConfigError, AugmentationConfigError, FileNotFoundError) as exc:
        print(f"seqtta: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, TrainingDivergedError, ValueError, OSError) as exc:
        print(f"seqtta: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Experiment configuration: one YAML/JSON file drives every CLI stage."""

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .augmentation import AugmentationConfigError, AugmentationSpec
from .evaluation import M_GRID, NOISE_GRID, SIGMA_GRID, SWEEP_AXES
from .tta import SPACES, TtaConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


def _check_keys(block, allowed, where):
    if block is None:
        return {}
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = set(block) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    return dict(block)


def _spec(d, where):
    try:
        return AugmentationSpec.from_dict(d)
    except (AugmentationConfigError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class DatasetConfig:
    path: Optional[str] = None
    format: Optional[str] = None
    k_core: int = 5
    max_len: int = 50
    keys_path: Optional[str] = None


@dataclass
class ModelConfig:
    encoder: str = "attention"
    d: int = 64
    n_blocks: int = 2
    n_heads: int = 1
    epochs: int = 50
    batch_size: int = 256
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    patience: int = 10
    eval_every: int = 1


@dataclass
class TrainAugConfig:
    operator: Optional[dict] = None
    n_variants: int = 1


@dataclass
class TtaBlock:
    operator: Optional[dict] = None
    m: int = 10
    include_original: bool = False
    aggregate_space: str = "probability"
    precompute_index: bool = False


@dataclass
class SweepConfig:
    axis: str = "sigma"
    grid: Optional[list] = None


@dataclass
class AnalysisConfig:
    similarity_operators: list = field(default_factory=list)
    timing_operators: list = field(default_factory=list)
    vocab_sizes: list = field(default_factory=list)
    repeats: int = 3
    m: int = 10
    max_users: Optional[int] = None


@dataclass
class EvalConfig:
    exclude_seen: bool = False
    chunk_size: int = 256
    top_k: int = 10


_BLOCKS = {"dataset": DatasetConfig, "model": ModelConfig, "train_augmentation": TrainAugConfig,
           "tta": TtaBlock, "sweep": SweepConfig, "analysis": AnalysisConfig,
           "evaluation": EvalConfig}


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train_augmentation: TrainAugConfig = field(default_factory=TrainAugConfig)
    tta: TtaBlock = field(default_factory=TtaBlock)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = "runs/default"
    parallel: int = 1

    @classmethod
    def from_dict(cls, d, base_dir=None):
        """Build and fully validate; relative paths (dataset files and the output
        directory) resolve against ``base_dir``."""
        d = _check_keys(d, list(_BLOCKS) + ["seed", "output_dir", "parallel"], "config")
        kwargs = {}
        for name, block_cls in _BLOCKS.items():
            allowed = [f for f in block_cls.__dataclass_fields__]
            kwargs[name] = block_cls(**_check_keys(d.get(name), allowed, name))
        for name in ("seed", "output_dir", "parallel"):
            if name in d:
                kwargs[name] = d[name]
        cfg = cls(**kwargs)
        if base_dir is not None:
            for attr in ("path", "keys_path"):
                p = getattr(cfg.dataset, attr)
                if p is not None and not Path(p).is_absolute():
                    setattr(cfg.dataset, attr, str(Path(base_dir) / p))
            if not Path(cfg.output_dir).is_absolute():
                cfg.output_dir = str(Path(base_dir) / cfg.output_dir)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            try:
                d = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(d or {}, base_dir=path.parent)

    def validate(self):
        def positive_int(value, name, minimum=1):
            if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
                raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")

        positive_int(self.seed, "seed", 0)
        positive_int(self.parallel, "parallel")
        ds = self.dataset
        positive_int(ds.k_core, "dataset.k_core")
        positive_int(ds.max_len, "dataset.max_len", 3)
        if ds.format not in (None, "csv", "tsv", "jsonl", "json"):
            raise ConfigError(f"dataset.format {ds.format!r} not supported")
        mo = self.model
        if mo.encoder not in ("attention", "gru"):
            raise ConfigError(f"model.encoder must be 'attention' or 'gru', got {mo.encoder!r}")
        for name in ("d", "n_blocks", "n_heads", "epochs", "batch_size", "patience",
                     "eval_every"):
            positive_int(getattr(mo, name), f"model.{name}")
        if mo.encoder == "attention" and mo.d % mo.n_heads:
            raise ConfigError("model.d must be divisible by model.n_heads")
        if not mo.lr > 0 or not 0 <= mo.beta1 < 1 or not 0 <= mo.beta2 < 1:
            raise ConfigError("model.lr must be > 0 and betas in [0, 1)")
        ta = self.train_augmentation
        if ta.operator is not None:
            _spec(ta.operator, "train_augmentation.operator")
        positive_int(ta.n_variants, "train_augmentation.n_variants")
        tt = self.tta
        if tt.operator is not None:
            _spec(tt.operator, "tta.operator")
        positive_int(tt.m, "tta.m")
        if tt.aggregate_space not in SPACES:
            raise ConfigError(f"tta.aggregate_space must be one of {SPACES}")
        sw = self.sweep
        if sw.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis must be one of {SWEEP_AXES}")
        if sw.grid is not None:
            if not isinstance(sw.grid, list) or not sw.grid:
                raise ConfigError("sweep.grid must be a non-empty list")
            if sw.axis == "noise_interval" and not all(
                    isinstance(p, (list, tuple)) and len(p) == 2 for p in sw.grid):
                raise ConfigError("sweep.grid for noise_interval must hold [a, b] pairs")
            if sw.axis == "m" and not all(isinstance(v, int) and v >= 1 for v in sw.grid):
                raise ConfigError("sweep.grid for m must hold positive integers")
            if sw.axis in ("sigma", "ratio") and tt.operator is not None:
                spec = _spec(tt.operator, "tta.operator")
                for v in sw.grid:
                    try:
                        spec.with_(**{sw.axis: float(v)})
                    except (AugmentationConfigError, TypeError, ValueError) as exc:
                        raise ConfigError(f"sweep.grid value {v!r}: {exc}") from exc
        an = self.analysis
        for i, op in enumerate(an.similarity_operators):
            _spec(op, f"analysis.similarity_operators[{i}]")
        for i, op in enumerate(an.timing_operators):
            _spec(op, f"analysis.timing_operators[{i}]")
        if an.vocab_sizes:
            for v in an.vocab_sizes:
                positive_int(v, "analysis.vocab_sizes entry", 2)
        positive_int(an.repeats, "analysis.repeats")
        positive_int(an.m, "analysis.m")
        ev = self.evaluation
        positive_int(ev.chunk_size, "evaluation.chunk_size")
        positive_int(ev.top_k, "evaluation.top_k")
        return self

    # -- derived objects -------------------------------------------------------

    def model_params(self):
        p = asdict(self.model)
        p["max_len"] = self.dataset.max_len
        p["random_state"] = self.seed
        return p

    def tta_config(self):
        if self.tta.operator is None:
            raise ConfigError("tta.operator is required for this command")
        t = self.tta
        return TtaConfig(_spec(t.operator, "tta.operator"), t.m, t.include_original,
                         t.aggregate_space, self.seed, t.precompute_index)

    def sweep_grid(self):
        if self.sweep.grid is not None:
            grid = self.sweep.grid
            return [tuple(p) for p in grid] if self.sweep.axis == "noise_interval" else grid
        defaults = {"sigma": SIGMA_GRID, "ratio": SIGMA_GRID, "m": M_GRID,
                    "noise_interval": NOISE_GRID}
        return list(defaults[self.sweep.axis])

    def to_dict(self):
        return asdict(self)

    def echo(self):
        """Config as echoed into outputs; the output location is left out."""
        d = copy.deepcopy(self.to_dict())
        d.pop("output_dir")
        d.pop("parallel")
        return d

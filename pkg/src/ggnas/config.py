"""Configuration dataclasses and config-file loading with schema validation."""

import dataclasses
import json
from dataclasses import dataclass, field

import yaml


class ConfigError(ValueError):
    """Raised with the full list of schema violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass
class GgmConfig:
    """Settings for the inter-cell communication module."""

    mode: str = "ggm"              # ggm | fc | off
    d: int = 64                    # embedding / graph-convolution width
    gamma: float = 0.5             # fusion coefficient
    graph: str = "edge_similarity" # edge_similarity | operation_identity
    shared_weights: bool = False   # one weight set for all adjacent pairs
    chained: bool = True           # propagate updated (vs raw) previous logits


@dataclass
class OptimConfig:
    alpha_lr: float = 0.001
    alpha_betas: tuple = (0.5, 0.999)
    alpha_weight_decay: float = 0.0001
    w_lr: float = 0.025
    w_lr_min: float = 0.001
    w_momentum: float = 0.9
    w_weight_decay: float = 0.001


@dataclass
class SearchConfig:
    num_cells: int = 14
    num_intermediate: int = 2
    initial_channels: int = 8
    # None -> place reductions at K//3 and 2K//3 (feature stride 16 with the
    # stride-4 stem).
    reductions: list = None
    num_classes: int = 3
    image_size: int = 32
    aspp_rates: tuple = (1, 6, 12)
    aspp_channels: int = 32

    beta: float = 0.005
    temp_init: float = 1.0
    temp_min: float = 0.03
    temp_shape: str = "linear"     # linear | exponential

    batch_size: int = 16
    total_steps: int = 400
    seed: int = 0
    init_scale: float = 0.001      # stddev of the architecture-logit init

    # Compute the cross-entropy term on the held-out split instead of the
    # search-train split (still a single combined update).
    arch_on_held_out: bool = False
    # Derive the genotype from the communication-updated logits rather than
    # the raw ones.
    derive_from_updated: bool = True

    log_every: int = 10
    checkpoint_every: int = 100

    ggm: GgmConfig = field(default_factory=GgmConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def resolved_reductions(self):
        if self.reductions is not None:
            return tuple(self.reductions)
        k = self.num_cells
        if k < 3:
            return ()
        return (k // 3, 2 * k // 3)

    def to_dict(self):
        return _asdict(self)


@dataclass
class DatasetConfig:
    n_images: int = 320
    image_size: int = 32
    num_classes: int = 3
    seed: int = 0

    def to_dict(self):
        return _asdict(self)


@dataclass
class FinetuneConfig:
    epochs: int = 12
    batch_size: int = 8
    lr: float = 0.01
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0001
    bootstrap_fraction: float = 0.25  # hardest-pixel share kept in the loss
    crop_size: int = 0                # 0 -> full image, no augmentation crop
    augment: bool = True
    eval_batch_size: int = 8
    seed: int = 0

    def to_dict(self):
        return _asdict(self)


def _asdict(cfg):
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = _asdict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


_SECTION_TYPES = {"search": SearchConfig, "dataset": DatasetConfig, "finetune": FinetuneConfig}
_NESTED_TYPES = {"ggm": GgmConfig, "optim": OptimConfig}


def _coerce(cls, data, prefix, violations):
    """Build dataclass `cls` from `data`, collecting every violation."""
    kwargs = {}
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in known:
            violations.append(f"{prefix}{key}: unknown field")
            continue
        if key in _NESTED_TYPES:
            if not isinstance(value, dict):
                violations.append(f"{prefix}{key}: expected mapping")
                continue
            kwargs[key] = _coerce(_NESTED_TYPES[key], value, f"{prefix}{key}.", violations)
            continue
        default = getattr(cls(), key)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                violations.append(f"{prefix}{key}: expected bool, got {value!r}")
                continue
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                violations.append(f"{prefix}{key}: expected int, got {value!r}")
                continue
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                violations.append(f"{prefix}{key}: expected number, got {value!r}")
                continue
            value = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                violations.append(f"{prefix}{key}: expected string, got {value!r}")
                continue
        elif isinstance(default, tuple) or (default is None and key == "reductions"):
            if not isinstance(value, (list, tuple)):
                violations.append(f"{prefix}{key}: expected list, got {value!r}")
                continue
            value = tuple(value) if isinstance(default, tuple) else list(value)
        kwargs[key] = value
    return cls(**kwargs)


def validate_search_config(cfg):
    """Semantic checks beyond types; returns a list of violations."""
    v = []
    if cfg.num_cells < 1:
        v.append("search.num_cells: must be >= 1")
    if cfg.num_intermediate < 1:
        v.append("search.num_intermediate: must be >= 1")
    if cfg.initial_channels < 1:
        v.append("search.initial_channels: must be >= 1")
    if cfg.num_classes < 2:
        v.append("search.num_classes: must be >= 2")
    if cfg.beta < 0:
        v.append("search.beta: must be >= 0")
    if cfg.temp_init <= 0 or cfg.temp_min <= 0:
        v.append("search.temp_init/temp_min: must be > 0")
    if cfg.temp_min > cfg.temp_init:
        v.append("search.temp_min: must not exceed temp_init")
    if cfg.temp_shape not in ("linear", "exponential"):
        v.append(f"search.temp_shape: unknown shape {cfg.temp_shape!r}")
    if cfg.batch_size < 1:
        v.append("search.batch_size: must be >= 1")
    if cfg.total_steps < 1:
        v.append("search.total_steps: must be >= 1")
    if cfg.init_scale < 0:
        v.append("search.init_scale: must be >= 0")
    if cfg.ggm.mode not in ("ggm", "fc", "off"):
        v.append(f"search.ggm.mode: unknown mode {cfg.ggm.mode!r}")
    if cfg.ggm.graph not in ("edge_similarity", "operation_identity"):
        v.append(f"search.ggm.graph: unknown graph {cfg.ggm.graph!r}")
    if cfg.ggm.d < 1:
        v.append("search.ggm.d: must be >= 1")
    if not 0.0 <= cfg.ggm.gamma <= 1.0:
        v.append("search.ggm.gamma: must lie in [0, 1]")
    for lr in (cfg.optim.alpha_lr, cfg.optim.w_lr, cfg.optim.w_lr_min):
        if lr <= 0:
            v.append("search.optim: learning rates must be > 0")
            break
    reductions = cfg.resolved_reductions()
    if list(reductions) != sorted(set(reductions)):
        v.append("search.reductions: must be strictly increasing without duplicates")
    if any(r < 0 or r >= cfg.num_cells for r in reductions):
        v.append("search.reductions: positions must lie in [0, num_cells)")
    total_stride = 4 * 2 ** len(reductions)
    if cfg.image_size % total_stride != 0:
        v.append(
            f"search.image_size: {cfg.image_size} not divisible by total stride {total_stride}"
        )
    return v


def load_config_file(path):
    """Parse a YAML/JSON config file into (SearchConfig, DatasetConfig, FinetuneConfig).

    Raises ConfigError listing every violation at once.
    """
    with open(path) as fh:
        text = fh.read()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"config parse error: {exc}"]) from exc
    if not isinstance(data, dict):
        raise ConfigError(["config root: expected mapping"])
    violations = []
    out = {}
    for section, value in data.items():
        if section not in _SECTION_TYPES:
            violations.append(f"{section}: unknown section")
            continue
        if not isinstance(value, dict):
            violations.append(f"{section}: expected mapping")
            continue
        out[section] = _coerce(_SECTION_TYPES[section], value, f"{section}.", violations)
    search = out.get("search", SearchConfig())
    dataset = out.get("dataset", DatasetConfig())
    finetune = out.get("finetune", FinetuneConfig())
    # Keep the dataset geometry in lockstep with the layout unless overridden.
    if "dataset" in out:
        raw = data["dataset"]
        if "image_size" not in raw:
            dataset.image_size = search.image_size
        if "num_classes" not in raw:
            dataset.num_classes = search.num_classes
    else:
        dataset.image_size = search.image_size
        dataset.num_classes = search.num_classes
    violations.extend(validate_search_config(search))
    if dataset.n_images < 10:
        violations.append("dataset.n_images: must be >= 10")
    if dataset.image_size != search.image_size:
        violations.append("dataset.image_size: must match search.image_size")
    if dataset.num_classes != search.num_classes:
        violations.append("dataset.num_classes: must match search.num_classes")
    if finetune.epochs < 0:
        violations.append("finetune.epochs: must be >= 0")
    if not 0 < finetune.bootstrap_fraction <= 1:
        violations.append("finetune.bootstrap_fraction: must lie in (0, 1]")
    if violations:
        raise ConfigError(violations)
    return search, dataset, finetune


def dump_config(search, dataset=None, finetune=None):
    doc = {"search": search.to_dict()}
    if dataset is not None:
        doc["dataset"] = dataset.to_dict()
    if finetune is not None:
        doc["finetune"] = finetune.to_dict()
    return json.dumps(doc, indent=2, sort_keys=True)

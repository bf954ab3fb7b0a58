"""Experiment configuration: YAML file plus ``--set key=value`` overrides."""

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from omnifuse.fusion import FUSION_KINDS
from omnifuse.tasks import TaskSpec
from omnifuse.transfer import MODES
from omnifuse.world import DEFAULT_EXPERTS, ExpertSpec, WorldConfig


class ConfigError(ValueError):
    pass


def default_tasks():
    """Evaluation suite spread over the three observation domains."""
    return [
        TaskSpec("attrs", "binary-attrs", "attrs", 0, 800, 200, 500, missing_rate=0.01),
        TaskSpec("age", "regression", "age", 1, 800, 200, 500, missing_rate=0.01),
        TaskSpec("age-group", "classification", "age_class", 1, 800, 200, 500, missing_rate=0.01),
        TaskSpec("gender", "classification", "gender", 1, 800, 200, 500, missing_rate=0.01),
        TaskSpec("ethnicity", "classification", "ethnic", 1, 800, 200, 500, missing_rate=0.01),
        TaskSpec("age-small", "regression", "age", 2, 150, 50, 300, missing_rate=0.01),
        TaskSpec("expression-small", "classification", "expression", 2, 200, 100, 500, missing_rate=0.01),
        TaskSpec("expression", "classification", "expression", 2, 1000, 200, 500, missing_rate=0.01),
        TaskSpec("pain", "regression", "pain", 2, 800, 200, 500, missing_rate=0.01),
        TaskSpec("identity", "identity-pairs", "identity", 1, 800, 200, 500, n_pairs=600, missing_rate=0.01),
    ]


@dataclass
class PoolConfig:
    n: int = 6000
    domain_id: int = 0


@dataclass
class FusionConfig:
    kind: str = "ae"
    latent: int = None  # None -> power-of-two rule
    n_layers: int = 3
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 64
    noise_sigma: float = 0.1
    beta: float = 1.0
    compare: list = field(default_factory=lambda: ["pca", "ae", "dae", "vae"])


@dataclass
class DistillSection:
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 64
    student_hidden: list = field(default_factory=lambda: [256, 256])
    student_mode: str = "mlp"
    mt: bool = True
    posthoc_epochs: int = 60


@dataclass
class TransferSection:
    epochs: int = 100
    lr: float = 3e-3
    batch_size: int = 128
    encoder_lr_scale: float = 0.1
    n_folds: int = 10
    modes: list = field(default_factory=lambda: list(MODES))
    select: bool = True
    tasks: list = field(default_factory=default_tasks)


@dataclass
class SweepConfig:
    dims: list = field(default_factory=list)
    transfer: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    experts: list = field(default_factory=lambda: list(DEFAULT_EXPERTS))
    pool: PoolConfig = field(default_factory=PoolConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    distill: DistillSection = field(default_factory=DistillSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output_dir: str = None

    def validate(self):
        if self.fusion.kind not in FUSION_KINDS:
            raise ConfigError(f"fusion.kind must be one of {FUSION_KINDS}")
        for kind in self.fusion.compare:
            if kind not in FUSION_KINDS:
                raise ConfigError(f"fusion.compare: unknown kind {kind!r}")
        if self.fusion.latent is not None and self.fusion.latent < 1:
            raise ConfigError("fusion.latent must be positive")
        if self.fusion.n_layers < 1:
            raise ConfigError("fusion.n_layers must be >= 1")
        if not self.experts:
            raise ConfigError("at least one expert is required")
        names = [e.name for e in self.experts]
        if len(set(names)) != len(names):
            raise ConfigError("expert names must be unique")
        if self.distill.student_mode not in ("mlp", "conv"):
            raise ConfigError("distill.student_mode must be 'mlp' or 'conv'")
        if self.distill.student_mode == "conv" and not self.world.image_mode:
            raise ConfigError("a conv student needs world.image_mode")
        for mode in self.transfer.modes:
            if mode not in MODES:
                raise ConfigError(f"transfer.modes: unknown mode {mode!r}")
        tnames = [t.name for t in self.transfer.tasks]
        if len(set(tnames)) != len(tnames):
            raise ConfigError("task names must be unique")
        for t in self.transfer.tasks:
            if not 0 <= t.domain_id < self.world.n_domains:
                raise ConfigError(f"task {t.name}: domain {t.domain_id} outside the world's domains")
        if not 0 <= self.pool.domain_id < self.world.n_domains:
            raise ConfigError("pool.domain_id outside the world's domains")
        if self.pool.n < 10:
            raise ConfigError("pool.n must be >= 10")
        dims = self.sweep.dims
        if len(set(dims)) != len(dims) or list(dims) != sorted(dims):
            raise ConfigError("sweep.dims must be strictly increasing")
        for section in (self.fusion, self.distill, self.transfer):
            if section.epochs < 0 or section.lr <= 0 or section.batch_size < 1:
                raise ConfigError(f"{type(section).__name__}: bad epochs/lr/batch_size")
        return self

    def to_dict(self):
        return _plain(self)

    def digest(self):
        """SHA-256 over everything that affects results (the output location does not)."""
        d = self.to_dict()
        d.pop("output_dir", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    @property
    def run_id(self):
        return self.digest()[:12]


def _plain(obj):
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(cls, name, value, f"{where}.{name}" if where else name)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


_NESTED = {
    (ExperimentConfig, "world"): WorldConfig,
    (ExperimentConfig, "pool"): PoolConfig,
    (ExperimentConfig, "fusion"): FusionConfig,
    (ExperimentConfig, "distill"): DistillSection,
    (ExperimentConfig, "transfer"): TransferSection,
    (ExperimentConfig, "sweep"): SweepConfig,
}
_LISTS = {
    (ExperimentConfig, "experts"): ExpertSpec,
    (TransferSection, "tasks"): TaskSpec,
}


def _coerce(cls, name, value, where):
    if (cls, name) in _NESTED:
        return _build(_NESTED[(cls, name)], value, where)
    if (cls, name) in _LISTS:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        item = _LISTS[(cls, name)]
        out = [_build(item, v, f"{where}[{i}]") for i, v in enumerate(value)]
        if item is ExpertSpec:
            out = [ExpertSpec(**{**asdict(e), "hidden": tuple(e.hidden)}) for e in out]
        return out
    return value


def from_dict(data):
    return _build(ExperimentConfig, data or {}, "").validate()


def set_override(data, assignment):
    """Apply one ``dotted.key=value`` override; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    value = yaml.safe_load(raw)
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        if isinstance(node, list):
            node = node[int(p)]
        else:
            node = node.setdefault(p, {})
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value
    return data


def load_config(path=None, overrides=()):
    """Defaults, then the YAML file (if any), then overrides; validated."""
    data = ExperimentConfig().to_dict()
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _check_keys(loaded, data, "")
        data = _merge(data, loaded)
    for o in overrides:
        data = set_override(copy.deepcopy(data), o)
    return from_dict(data)


def _check_keys(user, defaults, where):
    for k, v in user.items():
        if k not in defaults:
            raise ConfigError(f"{where or 'config'}: unknown key {k}")
        if isinstance(v, dict) and isinstance(defaults[k], dict):
            _check_keys(v, defaults[k], f"{where}.{k}" if where else k)


def _merge(base, new):
    out = dict(base)
    for k, v in new.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)

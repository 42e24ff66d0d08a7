"""Experiment configuration: an INI file with one section per module.

Example (every key optional; these are the defaults)::

    [datapool]
    n_datasets = 7
    classes_per_dataset = 10
    dim = 16
    samples_per_class = 100
    separation = 4.0
    seed = 1
    mix = 1,2,2,2,1,2,0      # or: random
    mix_seed = 1
    keep_in_pool = true

    [oracle]
    kind = centroid          # centroid | softmax
    temperature = auto       # or a positive number
    calibration_entropy = 0.83
    lr = 0.5
    epochs = 300
    weight_decay = 0.001
    train_fraction = 0.8
    seed = 1
    rmt_blocks = 0           # >0 trains on block-encoded target data
    rmt_seed = 1000

    [attack]
    lambda = 0.83
    batch_size = 200
    delta_scale = 1.0
    max_epochs = 100
    seed = 7
    workers = 1

    [metrics]
    eps_rel = 0.05
    max_iter = 2000
    tol = 1e-6
    max_points = 500
    extract_samples = 500
    seed = 0
    gdi_epochs = 50

    [inversion]
    step = 0.1
    iterations = 500
    seed = 0

    [output]
    dir = out
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from adi.attack import AttackConfig
from adi.datapool import MIX_TABLE
from adi.errors import ConfigError
from adi.metrics import SinkhornConfig


@dataclass(frozen=True)
class PoolParams:
    n_datasets: int = 7
    classes_per_dataset: int = 10
    dim: int = 16
    samples_per_class: int = 100
    separation: float = 4.0
    seed: int = 1
    mix: tuple[int, ...] | None = MIX_TABLE[0]  # None draws classes uniformly at random
    mix_seed: int = 1
    keep_in_pool: bool = True


@dataclass(frozen=True)
class OracleParams:
    kind: str = "centroid"
    temperature: float | None = None
    calibration_entropy: float = 0.83
    lr: float = 0.5
    epochs: int = 300
    weight_decay: float = 1e-3
    train_fraction: float = 0.8
    seed: int = 1
    rmt_blocks: int = 0
    rmt_seed: int = 1000


@dataclass(frozen=True)
class MetricParams:
    eps_rel: float = 0.05
    max_iter: int = 2000
    tol: float = 1e-6
    max_points: int = 500
    extract_samples: int = 500
    seed: int = 0
    gdi_epochs: int = 50

    def sinkhorn(self) -> SinkhornConfig:
        return SinkhornConfig(eps_rel=self.eps_rel, max_iter=self.max_iter, tol=self.tol,
                              max_points=self.max_points, seed=self.seed)


@dataclass(frozen=True)
class InversionParams:
    step: float = 0.1
    iterations: int = 500
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    datapool: PoolParams = field(default_factory=PoolParams)
    oracle: OracleParams = field(default_factory=OracleParams)
    attack: AttackConfig = field(default_factory=AttackConfig)
    metrics: MetricParams = field(default_factory=MetricParams)
    inversion: InversionParams = field(default_factory=InversionParams)
    output: Path = Path("out")

    def with_output(self, path: str | Path) -> "ExperimentConfig":
        return replace(self, output=Path(path))


# INI key -> dataclass field, where they differ
_RENAMES = {("attack", "lambda"): "lam"}


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_value(section: str, key: str, raw: str, default):
    raw = raw.strip()
    if section == "datapool" and key == "mix":
        if raw.lower() == "random":
            return None
        return tuple(int(v) for v in raw.split(","))
    if section == "oracle" and key == "temperature":
        return None if raw.lower() == "auto" else float(raw)
    if isinstance(default, bool):
        return _bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _build(cls, section: str, values: dict):
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, raw in values.items():
        name = _RENAMES.get((section, key), key)
        if name not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        try:
            kwargs[name] = _parse_value(section, key, raw, getattr(defaults, name))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _check(cfg: ExperimentConfig) -> None:
    p = cfg.datapool
    for key in ("n_datasets", "classes_per_dataset", "dim", "samples_per_class"):
        if getattr(p, key) < 1:
            raise ConfigError(f"[datapool] {key} must be >= 1")
    if p.separation <= 0:
        raise ConfigError("[datapool] separation must be positive")
    if p.mix is not None and len(p.mix) != p.n_datasets:
        raise ConfigError(f"[datapool] mix needs {p.n_datasets} counts, got {len(p.mix)}")
    o = cfg.oracle
    if o.kind not in ("centroid", "softmax"):
        raise ConfigError(f"[oracle] kind must be centroid or softmax, got {o.kind!r}")
    if o.temperature is not None and o.temperature <= 0:
        raise ConfigError("[oracle] temperature must be positive or 'auto'")
    if not 0 < o.calibration_entropy < 1:
        raise ConfigError("[oracle] calibration_entropy must lie in (0, 1)")
    if not 0 < o.train_fraction < 1:
        raise ConfigError("[oracle] train_fraction must lie in (0, 1)")
    if o.rmt_blocks < 0:
        raise ConfigError("[oracle] rmt_blocks must be >= 0")
    if o.rmt_blocks and p.dim % o.rmt_blocks:
        raise ConfigError(f"[oracle] rmt_blocks {o.rmt_blocks} does not divide dim {p.dim}")
    m = cfg.metrics
    if m.eps_rel <= 0 or m.tol <= 0 or m.max_iter < 1 or m.max_points < 1:
        raise ConfigError("[metrics] eps_rel, tol, max_iter and max_points must be positive")
    if m.extract_samples < 1 or m.gdi_epochs < 1:
        raise ConfigError("[metrics] extract_samples and gdi_epochs must be >= 1")
    i = cfg.inversion
    if i.step <= 0 or i.iterations < 1:
        raise ConfigError("[inversion] step must be positive and iterations >= 1")


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    sections = {"datapool": PoolParams, "oracle": OracleParams, "attack": AttackConfig,
                "metrics": MetricParams, "inversion": InversionParams}
    built = {}
    for name in parser.sections():
        if name == "output":
            continue
        if name not in sections:
            raise ConfigError(f"unknown section [{name}]")
    for name, cls in sections.items():
        values = dict(parser[name]) if parser.has_section(name) else {}
        built[name] = _build(cls, name, values)
    out = Path("out")
    if parser.has_section("output"):
        extra = set(parser["output"]) - {"dir"}
        if extra:
            raise ConfigError(f"[output] unknown key {sorted(extra)[0]!r}")
        out = Path(parser["output"].get("dir", "out"))
    if base_dir is not None and not out.is_absolute():
        out = base_dir / out
    cfg = ExperimentConfig(output=out, **built)
    _check(cfg)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), base_dir=path.parent)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render a config back to INI text accepted by ``parse_config``."""
    lines = []
    for name in ("datapool", "oracle", "attack", "metrics", "inversion"):
        obj = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(obj):
            key = {v: k[1] for k, v in _RENAMES.items() if k[0] == name}.get(f.name, f.name)
            val = getattr(obj, f.name)
            if name == "datapool" and f.name == "mix":
                val = "random" if val is None else ",".join(map(str, val))
            elif name == "oracle" and f.name == "temperature":
                val = "auto" if val is None else repr(val)
            elif isinstance(val, bool):
                val = str(val).lower()
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{key} = {val}")
        lines.append("")
    lines += ["[output]", f"dir = {cfg.output}", ""]
    return "\n".join(lines)

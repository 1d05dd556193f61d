"""Run configuration: a flat key/value text format with nested sections.

The file format is INI-style. Corruptions use a compact expression syntax,
e.g. ``rotate(0.35)+noise(0.3)`` composes a rotation and additive Gaussian
noise left to right; ``shift`` and ``scale`` accept a scalar or ``|``-joined
per-dimension values. Budgets in sweep values are written ``n:m`` (n labels
per annotation batch, one annotation batch every m). Unknown sections or keys
are rejected; parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .selection import STRATEGIES
from .stream import CorruptionSpec, DomainSpec

TOGGLE_ROWS = ("none", "pd", "pd+cb", "pd+gnd", "pd+gnd+ema", "gnd", "gnd+ema",
               "pd+cb+gnd", "pd+cb+gnd+ema")


class ConfigError(ValueError):
    pass


# --- sections ----------------------------------------------------------------


@dataclass(frozen=True)
class ModelSection:
    input_dim: int = 8
    hidden: tuple[int, ...] = (24, 24)
    classes: int = 5
    norm_eps: float = 1e-5


@dataclass(frozen=True)
class SourceSection:
    kind: str = "blobs"            # blobs | file
    center_scale: float = 3.0
    cov_scale: float = 1.0
    per_class: int = 400
    dataset_path: str = ""
    holdout_frac: float = 0.2


@dataclass(frozen=True)
class PretrainSection:
    epochs: int = 40
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    snapshot: str = "source.snap"


@dataclass(frozen=True)
class ConfigDomain:
    name: str
    corrupt: str                   # corruption expression
    batches: int
    priors: tuple[float, ...] | None = None


@dataclass(frozen=True)
class EpisodeSection:
    mode: str = "ctta"
    batch_size: int = 64
    domains: tuple[ConfigDomain, ...] = ()


@dataclass(frozen=True)
class SelectionSection:
    strategy: str = "ours"
    sigma: float = 0.01
    mu: float = 0.0
    diff_draws: int = 1
    history_k: int = 5


@dataclass(frozen=True)
class BudgetSection:
    labels_per_batch: int = 1
    batches_per_label: int = 1


@dataclass(frozen=True)
class EngineSection:
    optimizer: str = "sgd"
    lr: float = 0.005
    momentum: float = 0.9
    alpha: float = 0.8
    threshold_factor: float = 0.4
    buffer_size: int = 0
    replay_draw: int = 32
    pd: bool = True
    cb: bool = True
    gnd: bool = True
    ema: bool = True
    idle_unsup_weight: str = "carried"
    source_norm_mode: str = "source"


@dataclass(frozen=True)
class OracleSection:
    kind: str = "ground_truth"
    noise_p: float = 0.0
    snapshot: str = ""
    timeout_s: float = 30.0
    fallback: str = "ground_truth"
    show_pseudo_hint: bool = True
    class_names: tuple[str, ...] = ()


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = "runs"


@dataclass(frozen=True)
class AblateSection:
    axis: str = "sigma"            # toggles | sigma | alpha | strategy | budget
    values: tuple[str, ...] = ()
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    source: SourceSection = field(default_factory=SourceSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    episode: EpisodeSection = field(default_factory=EpisodeSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    budget: BudgetSection = field(default_factory=BudgetSection)
    engine: EngineSection = field(default_factory=EngineSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    run: RunSection = field(default_factory=RunSection)
    ablate: AblateSection | None = None


# --- corruption expressions -----------------------------------------------------

_TERM_NAMES = {"shift": "feature-shift", "rotate": "feature-rotation",
               "noise": "additive-gaussian", "scale": "scale"}
_NAME_TERMS = {v: k for k, v in _TERM_NAMES.items()}


def parse_corruption(expr: str) -> CorruptionSpec:
    terms = [t.strip() for t in expr.split("+") if t.strip()]
    if not terms:
        raise ConfigError(f"empty corruption expression {expr!r}")
    specs = []
    for term in terms:
        if "(" not in term or not term.endswith(")"):
            raise ConfigError(f"malformed corruption term {term!r}; "
                              f"expected name(args)")
        name, args = term[:-1].split("(", 1)
        name = name.strip()
        if name not in _TERM_NAMES:
            raise ConfigError(f"unknown corruption {name!r}; "
                              f"expected one of {sorted(_TERM_NAMES)}")
        try:
            values = [float(v) for v in args.split("|")] if args else [0.0]
        except ValueError as exc:
            raise ConfigError(f"bad corruption arguments in {term!r}: {exc}") from exc
        vec = values[0] if len(values) == 1 else np.asarray(values)
        kind = _TERM_NAMES[name]
        if kind == "feature-shift":
            specs.append(CorruptionSpec(kind=kind, delta=vec))
        elif kind == "feature-rotation":
            specs.append(CorruptionSpec(kind=kind, angle=float(values[0])))
        elif kind == "additive-gaussian":
            specs.append(CorruptionSpec(kind=kind, sigma=float(values[0])))
        else:
            specs.append(CorruptionSpec(kind=kind, factors=vec))
    if len(specs) == 1:
        return specs[0]
    return CorruptionSpec(kind="compose", parts=specs)


def format_corruption(spec: CorruptionSpec) -> str:
    if spec.kind == "compose":
        return "+".join(format_corruption(p) for p in spec.parts)
    name = _NAME_TERMS[spec.kind]
    if spec.kind == "feature-shift":
        arg = spec.delta
    elif spec.kind == "feature-rotation":
        arg = spec.angle
    elif spec.kind == "additive-gaussian":
        arg = spec.sigma
    else:
        arg = spec.factors
    if isinstance(arg, np.ndarray):
        return f"{name}({'|'.join(repr(float(v)) for v in arg)})"
    return f"{name}({float(arg)!r})"


def build_domain(cd: ConfigDomain) -> DomainSpec:
    return DomainSpec(name=cd.name, corruption=parse_corruption(cd.corrupt),
                      batch_count=cd.batches,
                      priors=None if cd.priors is None else np.asarray(cd.priors))


# --- parsing ----------------------------------------------------------------------


def _section_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def _coerce(section: str, key: str, raw: str, kind: type, default):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)  # accepts "inf"
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def _parse_simple(parser, section: str, cls):
    values = {}
    proto = cls()
    known = _section_fields(cls)
    if parser.has_section(section):
        for key in parser.options(section):
            if key not in known:
                raise ConfigError(f"[{section}] unknown key {key!r}; "
                                  f"expected one of {known}")
        for f in fields(cls):
            if not parser.has_option(section, f.name):
                continue
            raw = parser.get(section, f.name)
            default = getattr(proto, f.name)
            if f.name == "hidden":
                values[f.name] = tuple(int(v) for v in raw.split(",") if v.strip()) \
                    if raw.strip() else ()
            elif f.name == "class_names":
                values[f.name] = tuple(v.strip() for v in raw.split(",") if v.strip())
            elif f.name in ("values",):
                values[f.name] = tuple(v.strip() for v in raw.split(",") if v.strip())
            elif f.name == "seeds":
                values[f.name] = tuple(int(v) for v in raw.split(",") if v.strip())
            elif isinstance(default, bool):
                values[f.name] = _coerce(section, f.name, raw, bool, default)
            elif isinstance(default, int):
                values[f.name] = _coerce(section, f.name, raw, int, default)
            elif isinstance(default, float):
                values[f.name] = _coerce(section, f.name, raw, float, default)
            else:
                values[f.name] = raw.strip()
    return cls(**values)


_KNOWN_SECTIONS = ("model", "source", "pretrain", "episode", "selection",
                   "budget", "engine", "oracle", "run", "ablate")


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc

    for section in parser.sections():
        if section.startswith("domain:"):
            continue
        if section not in _KNOWN_SECTIONS:
            raise ConfigError(f"unknown section [{section}]; expected one of "
                              f"{_KNOWN_SECTIONS} or [domain:<name>]")

    model = _parse_simple(parser, "model", ModelSection)
    source = _parse_simple(parser, "source", SourceSection)
    pretrain = _parse_simple(parser, "pretrain", PretrainSection)
    selection = _parse_simple(parser, "selection", SelectionSection)
    budget = _parse_simple(parser, "budget", BudgetSection)
    engine = _parse_simple(parser, "engine", EngineSection)
    oracle = _parse_simple(parser, "oracle", OracleSection)
    run = _parse_simple(parser, "run", RunSection)

    # episode + ordered domain sections
    episode_kwargs = {}
    domains: tuple[ConfigDomain, ...] = ()
    if parser.has_section("episode"):
        for key in parser.options("episode"):
            if key not in ("mode", "batch_size", "domains"):
                raise ConfigError(f"[episode] unknown key {key!r}")
        if parser.has_option("episode", "mode"):
            episode_kwargs["mode"] = parser.get("episode", "mode").strip()
        if parser.has_option("episode", "batch_size"):
            episode_kwargs["batch_size"] = _coerce("episode", "batch_size",
                                                   parser.get("episode", "batch_size"),
                                                   int, 64)
        if parser.has_option("episode", "domains"):
            names = [n.strip() for n in parser.get("episode", "domains").split(",")
                     if n.strip()]
            parsed = []
            for name in names:
                sec = f"domain:{name}"
                if not parser.has_section(sec):
                    raise ConfigError(f"[episode] domains references {name!r} "
                                      f"but section [{sec}] is missing")
                for key in parser.options(sec):
                    if key not in ("corrupt", "batches", "priors"):
                        raise ConfigError(f"[{sec}] unknown key {key!r}")
                if not parser.has_option(sec, "corrupt"):
                    raise ConfigError(f"[{sec}] missing required key 'corrupt'")
                corrupt = parser.get(sec, "corrupt").strip()
                parse_corruption(corrupt)  # validate eagerly
                batches = _coerce(sec, "batches", parser.get(sec, "batches", fallback="1"),
                                  int, 1)
                priors = None
                if parser.has_option(sec, "priors"):
                    raw = parser.get(sec, "priors").strip()
                    if raw and raw != "uniform":
                        try:
                            priors = tuple(float(v) for v in raw.split(","))
                        except ValueError as exc:
                            raise ConfigError(f"[{sec}] priors: {exc}") from exc
                parsed.append(ConfigDomain(name=name, corrupt=corrupt,
                                           batches=batches, priors=priors))
            domains = tuple(parsed)
    episode = EpisodeSection(domains=domains, **episode_kwargs)

    ablate = None
    if parser.has_section("ablate"):
        ablate = _parse_simple(parser, "ablate", AblateSection)

    cfg = RunConfig(model=model, source=source, pretrain=pretrain, episode=episode,
                    selection=selection, budget=budget, engine=engine, oracle=oracle,
                    run=run, ablate=ablate)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    m = cfg.model
    if m.input_dim < 1:
        raise ConfigError(f"[model] input_dim must be >= 1, got {m.input_dim}")
    if m.classes < 2:
        raise ConfigError(f"[model] classes must be >= 2, got {m.classes}")
    if any(h < 1 for h in m.hidden):
        raise ConfigError(f"[model] hidden widths must be >= 1, got {m.hidden}")
    if m.norm_eps <= 0:
        raise ConfigError(f"[model] norm_eps must be positive, got {m.norm_eps}")
    if cfg.source.kind not in ("blobs", "file"):
        raise ConfigError(f"[source] kind must be blobs or file, got {cfg.source.kind!r}")
    if cfg.source.kind == "file" and not cfg.source.dataset_path:
        raise ConfigError("[source] kind=file requires dataset_path")
    if cfg.source.kind == "blobs" and cfg.source.per_class < 1:
        raise ConfigError("[source] per_class must be >= 1")
    if not 0.0 <= cfg.source.holdout_frac < 1.0:
        raise ConfigError("[source] holdout_frac must lie in [0, 1)")
    if cfg.pretrain.epochs < 0:
        raise ConfigError("[pretrain] epochs must be >= 0")
    if cfg.episode.mode not in ("ctta", "ftta"):
        raise ConfigError(f"[episode] mode must be ctta or ftta, got {cfg.episode.mode!r}")
    if cfg.episode.batch_size < 1:
        raise ConfigError("[episode] batch_size must be >= 1")
    for cd in cfg.episode.domains:
        if cd.batches < 1:
            raise ConfigError(f"[domain:{cd.name}] batches must be >= 1")
        if cd.priors is not None:
            if len(cd.priors) != cfg.model.classes:
                raise ConfigError(f"[domain:{cd.name}] priors length "
                                  f"{len(cd.priors)} != classes {cfg.model.classes}")
            if any(p < 0 for p in cd.priors) or abs(sum(cd.priors) - 1.0) > 1e-9:
                raise ConfigError(f"[domain:{cd.name}] priors must be nonnegative "
                                  f"and sum to 1")
    if cfg.selection.strategy not in STRATEGIES + ("source",):
        raise ConfigError(f"[selection] strategy must be one of "
                          f"{STRATEGIES + ('source',)}, got {cfg.selection.strategy!r}")
    if cfg.selection.sigma < 0:
        raise ConfigError("[selection] sigma must be nonnegative")
    if cfg.selection.diff_draws < 1:
        raise ConfigError("[selection] diff_draws must be >= 1")
    if cfg.selection.history_k < 0:
        raise ConfigError("[selection] history_k must be >= 0")
    if cfg.budget.labels_per_batch < 0:
        raise ConfigError("[budget] labels_per_batch must be >= 0")
    if cfg.budget.batches_per_label < 1:
        raise ConfigError("[budget] batches_per_label must be >= 1")
    e = cfg.engine
    if e.optimizer not in ("sgd", "adam"):
        raise ConfigError(f"[engine] optimizer must be sgd or adam, got {e.optimizer!r}")
    if e.lr < 0:
        raise ConfigError("[engine] lr must be nonnegative")
    if not 0.0 < e.alpha < 1.0:
        raise ConfigError(f"[engine] alpha must lie in (0, 1), got {e.alpha}")
    if e.threshold_factor < 0:
        raise ConfigError("[engine] threshold_factor must be nonnegative")
    if e.buffer_size < 0 or e.replay_draw < 0:
        raise ConfigError("[engine] buffer_size and replay_draw must be >= 0")
    if e.idle_unsup_weight not in ("carried", "one"):
        raise ConfigError(f"[engine] idle_unsup_weight must be carried or one, "
                          f"got {e.idle_unsup_weight!r}")
    if e.source_norm_mode not in ("source", "batch"):
        raise ConfigError(f"[engine] source_norm_mode must be source or batch, "
                          f"got {e.source_norm_mode!r}")
    o = cfg.oracle
    if o.kind not in ("ground_truth", "noisy", "model", "human"):
        raise ConfigError(f"[oracle] unknown kind {o.kind!r}")
    if not 0.0 <= o.noise_p <= 1.0:
        raise ConfigError("[oracle] noise_p must lie in [0, 1]")
    if o.kind == "model" and not o.snapshot:
        raise ConfigError("[oracle] kind=model requires snapshot")
    if o.timeout_s <= 0:
        raise ConfigError("[oracle] timeout_s must be positive")
    if o.fallback not in ("", "ground_truth", "noisy", "model"):
        raise ConfigError(f"[oracle] fallback must be a non-human kind or empty, "
                          f"got {o.fallback!r}")
    if o.class_names and len(o.class_names) != cfg.model.classes:
        raise ConfigError(f"[oracle] class_names length {len(o.class_names)} "
                          f"!= classes {cfg.model.classes}")
    if cfg.ablate is not None:
        a = cfg.ablate
        if a.axis not in ("toggles", "sigma", "alpha", "strategy", "budget"):
            raise ConfigError(f"[ablate] unknown axis {a.axis!r}")
        if not a.values:
            raise ConfigError("[ablate] values must be non-empty")
        if not a.seeds:
            raise ConfigError("[ablate] seeds must be non-empty")
        for v in a.values:
            apply_axis_value(cfg, a.axis, v)  # validates each cell


def apply_axis_value(cfg: RunConfig, axis: str, value: str) -> RunConfig:
    """One sweep cell: the base config with a single axis value applied."""
    if axis == "sigma":
        try:
            return replace(cfg, selection=replace(cfg.selection, sigma=float(value)))
        except ValueError as exc:
            raise ConfigError(f"[ablate] bad sigma value {value!r}") from exc
    if axis == "alpha":
        try:
            return replace(cfg, engine=replace(cfg.engine, alpha=float(value)))
        except ValueError as exc:
            raise ConfigError(f"[ablate] bad alpha value {value!r}") from exc
    if axis == "strategy":
        if value not in STRATEGIES:
            raise ConfigError(f"[ablate] bad strategy {value!r}")
        return replace(cfg, selection=replace(cfg.selection, strategy=value))
    if axis == "budget":
        parts = value.split(":")
        if len(parts) != 2:
            raise ConfigError(f"[ablate] budget value {value!r}; expected n:m")
        try:
            n, mper = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise ConfigError(f"[ablate] budget value {value!r}: {exc}") from exc
        return replace(cfg, budget=BudgetSection(labels_per_batch=n,
                                                 batches_per_label=mper))
    if axis == "toggles":
        if value not in TOGGLE_ROWS:
            raise ConfigError(f"[ablate] toggle row {value!r}; expected one of "
                              f"{TOGGLE_ROWS}")
        on = set() if value == "none" else set(value.split("+"))
        eng = replace(cfg.engine, pd="pd" in on, cb="cb" in on,
                      gnd="gnd" in on, ema="ema" in on)
        return replace(cfg, engine=eng,
                       selection=replace(cfg.selection, strategy="ours"))
    raise ConfigError(f"[ablate] unknown axis {axis!r}")


# --- serialization -------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: RunConfig) -> str:
    out = io.StringIO()

    def section(name: str, obj, skip=()):
        out.write(f"[{name}]\n")
        for f in fields(obj):
            if f.name in skip:
                continue
            v = getattr(obj, f.name)
            if f.name in ("hidden",):
                out.write(f"{f.name} = {','.join(str(i) for i in v)}\n")
            elif f.name in ("class_names", "values"):
                out.write(f"{f.name} = {','.join(v)}\n")
            elif f.name == "seeds":
                out.write(f"{f.name} = {','.join(str(i) for i in v)}\n")
            else:
                out.write(f"{f.name} = {_fmt(v)}\n")
        out.write("\n")

    section("model", cfg.model)
    section("source", cfg.source)
    section("pretrain", cfg.pretrain)
    out.write("[episode]\n")
    out.write(f"mode = {cfg.episode.mode}\n")
    out.write(f"batch_size = {cfg.episode.batch_size}\n")
    out.write(f"domains = {','.join(d.name for d in cfg.episode.domains)}\n\n")
    for d in cfg.episode.domains:
        out.write(f"[domain:{d.name}]\n")
        out.write(f"corrupt = {d.corrupt}\n")
        out.write(f"batches = {d.batches}\n")
        if d.priors is not None:
            out.write(f"priors = {','.join(repr(p) for p in d.priors)}\n")
        out.write("\n")
    section("selection", cfg.selection)
    section("budget", cfg.budget)
    section("engine", cfg.engine)
    section("oracle", cfg.oracle)
    section("run", cfg.run)
    if cfg.ablate is not None:
        section("ablate", cfg.ablate)
    return out.getvalue()

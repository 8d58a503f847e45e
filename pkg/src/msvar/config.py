"""INI-style run configuration.

A config file has one section per component (``[synth]``, ``[dataset]``,
``[weights]``, ``[variational]``, ``[direct_weights]``, ``[train]``) holding
``key = value`` lines named after the corresponding dataclass fields. Values
are parsed by the type of the field default. Command-line flags are applied
on top, and :func:`dump` writes the fully resolved result.
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .maskmap import BINARY, CARDIAC, MaskMapSpec
from .segmenter import TrainConfig
from .synth import SynthConfig
from .variational import SolveConfig

__all__ = ["RunConfig", "load", "dump", "ConfigError"]


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class DatasetCounts:
    labeled: int = 10
    unlabeled: int = 15
    test: int = 10


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    synth: SynthConfig = SynthConfig()
    dataset: DatasetCounts = DatasetCounts()
    variational: SolveConfig = SolveConfig()
    train: TrainConfig = TrainConfig()

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def with_seed(self, seed):
        """Set the master seed and hand it to every seeded component."""
        return dataclasses.replace(
            self, seed=int(seed),
            variational=dataclasses.replace(self.variational, seed=int(seed)),
            train=dataclasses.replace(self.train, seed=int(seed)))


# nested dataclass fields are configured through their own sections
_NESTED = {"weights", "mapping"}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):  # intensity ranges
        return ", ".join(f"{lo!r}:{hi!r}" for lo, hi in value)
    if value is None:
        return "none"
    return str(value)


def _parse(text, default, key):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return None if text.lower() == "none" else float(text)
        if isinstance(default, tuple):
            return tuple(tuple(float(x) for x in part.split(":")) for part in text.split(","))
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def _section_values(obj):
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)
            if f.name not in _NESTED}


def _apply(obj, items, section):
    known = _section_values(obj)
    updates = {}
    for key, text in items:
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        updates[key] = _parse(text, known[key], f"[{section}] {key}")
    try:
        return dataclasses.replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def _format_inclusions(spec):
    return "; ".join(f"{a},{b}" for a, b in spec.inclusions)


def _parse_mapping(rules, inclusions):
    try:
        spec = MaskMapSpec.parse(rules, inclusions)
    except ValueError as exc:
        raise ConfigError(f"[variational] bad mapping {rules!r}: {exc}") from exc
    for known in (CARDIAC, BINARY):
        if (spec.rules, spec.inclusions) == (known.rules, known.inclusions):
            return known
    return spec


def load(path=None, base: RunConfig = RunConfig()):
    """Read ``path`` (if given) over ``base`` and return a :class:`RunConfig`."""
    cfg = base
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for section in parser.sections():
        items = list(parser.items(section))
        if section == "run":
            for key, text in items:
                if key != "seed":
                    raise ConfigError(f"[run] unknown key {key!r}")
                cfg = cfg.replace(seed=_parse(text, 0, "[run] seed"))
        elif section == "synth":
            cfg = cfg.replace(synth=_apply(cfg.synth, items, section))
        elif section == "dataset":
            cfg = cfg.replace(dataset=_apply(cfg.dataset, items, section))
        elif section == "weights":
            w = _apply(cfg.train.weights, items, section)
            cfg = cfg.replace(train=dataclasses.replace(cfg.train, weights=w))
        elif section == "variational":
            rest = [(k, v) for k, v in items if k not in ("mapping", "inclusions")]
            var = _apply(cfg.variational, rest, section)
            opts = dict(items)
            if "mapping" in opts or "inclusions" in opts:
                # a new rule table starts without the old table's inclusions
                default_incl = "" if "mapping" in opts else _format_inclusions(var.mapping)
                var = dataclasses.replace(var, mapping=_parse_mapping(
                    opts.get("mapping", var.mapping.format()),
                    opts.get("inclusions", default_incl)))
            cfg = cfg.replace(variational=var)
        elif section == "direct_weights":
            w = _apply(cfg.variational.weights, items, section)
            cfg = cfg.replace(variational=dataclasses.replace(cfg.variational, weights=w))
        elif section == "train":
            cfg = cfg.replace(train=_apply(cfg.train, items, section))
        else:
            raise ConfigError(f"unknown section [{section}]")
    return cfg


def dump(cfg: RunConfig, path=None):
    """Render the resolved config as INI text; also write it when ``path`` is set."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {"seed": str(cfg.seed)}
    sections = {
        "synth": cfg.synth,
        "dataset": cfg.dataset,
        "weights": cfg.train.weights,
        "variational": cfg.variational,
        "direct_weights": cfg.variational.weights,
        "train": cfg.train,
    }
    for name, obj in sections.items():
        parser[name] = {k: _format(v) for k, v in _section_values(obj).items()}
    parser["variational"]["mapping"] = cfg.variational.mapping.format()
    parser["variational"]["inclusions"] = _format_inclusions(cfg.variational.mapping)
    lines = []
    for name in parser.sections():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in parser[name].items())
        lines.append("")
    text = "\n".join(lines)
    if path is not None:
        Path(path).write_text(text)
    return text

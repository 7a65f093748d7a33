"""Typed, sectioned run configuration.

The file format is INI (``[section]`` headers, ``key = value`` lines). Every
key has a fixed type; list values are comma separated. Command-line
overrides use ``section.key=value`` and win over the file.
"""
import configparser
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import DataError


def _tuple_of(cast):
    def parse(text):
        text = text.strip()
        if not text:
            return ()
        return tuple(cast(part.strip()) for part in text.split(","))
    parse.__name__ = f"tuple_of_{cast.__name__}"
    return parse


def _optional(cast):
    def parse(text):
        text = text.strip()
        return None if text.lower() in ("", "none") else cast(text)
    parse.__name__ = f"optional_{cast.__name__}"
    return parse


def _bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_ints = _tuple_of(int)
_floats = _tuple_of(float)

# (section, key) -> (parser, default)
SCHEMA = {
    "data": {
        "interactions": (str, ""),
        "user_column": (str, "user_id"),
        "item_column": (str, "item_id"),
        "rating_column": (str, "rating"),
        "timestamp_column": (str, "timestamp"),
        "threshold": (float, 4.0),
        "split": (_floats, (0.8, 0.1, 0.1)),
        "split_seed": (int, 0),
    },
    "model": {
        "embedding_dim": (int, 64),
        "context_dim": (int, 16),
        "cross_layers": (int, 2),
        "cross_variant": (str, "vector"),
        "deep_layers": (_ints, (128, 64)),
        "learning_rate": (float, 1e-3),
        "weight_decay": (float, 1e-5),
        "l2_reg": (float, 0.0),
        "batch_size": (int, 2048),
        "max_epochs": (int, 20),
        "patience": (int, 5),
        "negative_ratio": (int, 1),
    },
    "graph": {
        "encoder": (str, "table"),
        "layers": (int, 2),
        "readout": (_optional(_floats), None),
    },
    "rerank": {
        "n_k": (int, 2),
        "n_max": (int, 10),
        "context_policy": (str, "query"),
        "exclude_self": (_bool, False),
        "shortlist": (_optional(int), None),
    },
    "eval": {
        "ks": (_ints, (10, 20)),
        "seeds": (_ints, (0,)),
        "nk_grid": (_ints, (1, 2, 5, 10)),
        "bench_epochs": (int, 2),
    },
    "grid": {},
    "run": {
        "threads": (int, 0),
    },
}

# sections that do not change any artifact
VOLATILE_SECTIONS = ("run",)


@dataclass
class RunConfig:
    """Parsed configuration: ``values[section][key]`` with typed values."""

    values: dict = field(default_factory=dict)

    def __getitem__(self, section):
        return self.values[section]

    def get(self, section, key):
        return self.values[section][key]

    def model_params(self):
        """Keyword arguments for :class:`graphrerank.model.DCNRanker`."""
        params = dict(self.values["model"])
        params["deep_layers"] = tuple(params["deep_layers"])
        g = self.values["graph"]
        params.update(encoder=g["encoder"], graph_layers=g["layers"], readout=g["readout"])
        return params

    def schema_mapping(self):
        d = self.values["data"]
        return {"user_id": d["user_column"], "item_id": d["item_column"],
                "rating": d["rating_column"], "timestamp": d["timestamp_column"]}

    def grid(self):
        """Declared hyper-parameter grid as ``{DCNRanker param: [values]}``."""
        return {k: list(v) for k, v in self.values["grid"].items()}

    def threads(self):
        return self.values["run"]["threads"] or os.cpu_count() or 1

    def canonical(self):
        """JSON-ready dict without the sections that never affect outputs."""
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(kv.items())}
                for s, kv in sorted(self.values.items()) if s not in VOLATILE_SECTIONS}

    def digest(self):
        payload = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_ini(self):
        lines = []
        for section, kv in self.values.items():
            lines.append(f"[{section}]")
            for key, value in kv.items():
                lines.append(f"{key} = {_render(value)}")
            lines.append("")
        return "\n".join(lines)

    def validate(self, need_interactions=False):
        d = self.values["data"]
        if need_interactions:
            if not d["interactions"]:
                raise DataError("no interactions file configured (data.interactions)")
            if not Path(d["interactions"]).exists():
                raise DataError(f"{d['interactions']}: no such file")
        if not self.values["eval"]["seeds"]:
            raise ValueError("eval.seeds must not be empty")
        if any(k <= 0 for k in self.values["eval"]["ks"]):
            raise ValueError("eval.ks must be positive")
        if any(k < 1 for k in self.values["eval"]["nk_grid"]) or self.values["rerank"]["n_k"] < 1:
            raise ValueError("n_k values must be >= 1")
        if self.values["rerank"]["context_policy"] not in ("query", "zero"):
            raise ValueError("rerank.context_policy must be 'query' or 'zero'")
        if self.values["graph"]["encoder"] not in ("table", "graph"):
            raise ValueError("graph.encoder must be 'table' or 'graph'")
        return self


def _render(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_render(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _grid_parser(key):
    model = SCHEMA["model"]
    if key not in model:
        raise ValueError(f"grid key {key!r} is not a model parameter")
    cast = model[key][0]
    if cast is _ints:
        # one tuple per ';'-separated choice
        return lambda text: tuple(_ints(part) for part in text.split(";"))
    return _tuple_of(cast)


def _parse(section, key, text):
    if section == "grid":
        return _grid_parser(key)(text)
    try:
        cast = SCHEMA[section][key][0]
    except KeyError:
        raise ValueError(f"unknown config key {section}.{key}") from None
    try:
        return cast(text)
    except ValueError as exc:
        raise ValueError(f"bad value for {section}.{key}: {text!r} ({exc})") from None


def default_config():
    return RunConfig({s: {k: default for k, (_, default) in keys.items()} for s, keys in SCHEMA.items()})


def load_config(path=None, overrides=()):
    """Defaults, then the file at ``path`` (if any), then ``section.key=value`` overrides."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise DataError(f"{path}: no such config file")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read(path, encoding="utf-8")
        for section in parser.sections():
            if section not in SCHEMA:
                raise ValueError(f"unknown config section [{section}]")
            for key, text in parser.items(section):
                cfg.values[section][key] = _parse(section, key, text)
    for item in overrides:
        set_value(cfg, item)
    return cfg


def set_value(cfg, assignment):
    """Apply one ``section.key=value`` override."""
    name, sep, text = assignment.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot:
        raise ValueError(f"override must look like section.key=value, got {assignment!r}")
    if section not in SCHEMA:
        raise ValueError(f"unknown config section {section!r}")
    cfg.values[section][key] = _parse(section, key, text)
    return cfg

"""Run configuration: a JSON document with sections, fully defaulted and validated."""

from __future__ import annotations

import copy
import difflib
import hashlib
import json
from dataclasses import dataclass
from typing import Any

from . import dsl, grammar, synthgen
from .evaluator import TASK_BASES, TrainConfig
from .grammar import GrammarConfig
from .search import SearchConfig


class ConfigError(grammar.ConfigError):
    def __init__(self, key: str, reason: str):
        self.key = key
        self.reason = reason
        super().__init__(f"{key}: {reason}")


# key -> (default, description); the single source of truth for defaults and --help
SCHEMA: dict[str, dict[str, tuple[Any, str]]] = {
    "": {
        "seed": (0, "global seed"),
        "task": ("primitive", "primitive | mobility"),
        "threads": (1, "worker threads for fold training (AGP_THREADS / --threads override)"),
    },
    "paths": {
        "data": ("", "dataset file; empty = generate from the synthgen section"),
        "out": ("runs", "root directory for run directories"),
    },
    "synthgen": {
        "shapes_count": (60, "shapes per domain"),
        "points_per_shape": (512, "points per shape"),
        "noise": (0.0, "gaussian position noise sigma"),
    },
    "grammar": {
        "max_height": (3, "maximum tree height (2 or 3)"),
        "grouping": (list(grammar.FULL_GROUPING), "grouping operator candidates"),
        "unary": (list(grammar.FULL_UNARY), "unary operator candidates"),
        "binary": (list(grammar.FULL_BINARY), "binary operator candidates"),
        "operants": ("full", "full = 7 derived operants, base = the two base features only"),
        "allow_centralize": (True, "keep centralize among unary choices"),
        "radius": (0.5, "part-aware neighbor radius"),
        "n_samples": (32, "neighbors sampled per point"),
    },
    "search": {
        "epochs": (30, "search epochs"),
        "samples_per_epoch": (4, "trees sampled per epoch"),
        "lr": (0.1, "REINFORCE learning rate on logits"),
        "baseline_decay": (0.9, "reward baseline EMA decay"),
        "reward_mode": ("gap", "gap | val"),
        "single_split": (False, "one train/val split instead of leave-one-domain-out"),
        "fold_epochs": (1, "training epochs per fold during search"),
        "test_domain": (-1, "index of the held-out test domain"),
        "record_wall_time": (False, "log wall_ms (makes event logs non-reproducible)"),
    },
    "selection": {
        "pool_size": (8, "K, trees sampled for selection"),
        "strategy": ("greedy", "greedy | topk:K"),
        "fold_epochs": (5, "training epochs per fold during selection"),
    },
    "evaluator": {
        "final_epochs": (20, "epochs of the final training run"),
        "lr": (5e-3, "Adam learning rate"),
        "weight_decay": (1e-4, "L2 weight decay"),
        "lambda_sup": (1.0, "supervision loss weight"),
        "hidden": ([64, 64], "hidden layer widths"),
        "knn": (16, "neighbors for descriptor statistics"),
        "target_clip": (10.0, "clip standardized targets at this magnitude"),
    },
}

_INT = {"seed", "threads", "shapes_count", "points_per_shape", "max_height", "n_samples", "epochs",
        "samples_per_epoch", "fold_epochs", "test_domain", "pool_size", "final_epochs", "knn"}


def defaults() -> dict:
    out: dict = {}
    for sec, keys in SCHEMA.items():
        target = out if sec == "" else out.setdefault(sec, {})
        for k, (v, _) in keys.items():
            target[k] = copy.deepcopy(v)
    return out


def all_keys() -> list[str]:
    return [k if sec == "" else f"{sec}.{k}" for sec, keys in SCHEMA.items() for k in keys]


def help_text() -> str:
    lines = ["config keys (default):"]
    for sec, keys in SCHEMA.items():
        for k, (v, doc) in keys.items():
            name = k if sec == "" else f"{sec}.{k}"
            lines.append(f"  {name} = {json.dumps(v)}  {doc}")
    return "\n".join(lines)


def _unknown(key: str, options: list[str]) -> ConfigError:
    near = difflib.get_close_matches(key, options, n=1, cutoff=0.5)
    hint = f"; did you mean {near[0]!r}?" if near else ""
    return ConfigError(key, f"unknown key{hint}")


def _check_type(key: str, value, default):
    name = key.rsplit(".", 1)[-1]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
    elif name in _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
    return value


def _assign(cfg: dict, key: str, value) -> None:
    sec, _, name = key.rpartition(".")
    if sec not in SCHEMA:
        if "." not in key:
            raise _unknown(key, all_keys() + [s for s in SCHEMA if s])
        raise _unknown(key, all_keys())
    if name not in SCHEMA[sec]:
        raise _unknown(key, all_keys())
    value = _check_type(key, value, SCHEMA[sec][name][0])
    (cfg if sec == "" else cfg[sec])[name] = value


def _merge(cfg: dict, doc: dict) -> None:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key, value in doc.items():
        if key in SCHEMA and key != "":
            if not isinstance(value, dict):
                raise ConfigError(key, "section must be an object")
            for sub, v in value.items():
                _assign(cfg, f"{key}.{sub}", v)
        elif isinstance(value, dict) and value:
            # misspelled section: suggest against the full dotted path
            raise _unknown(f"{key}.{next(iter(value))}", all_keys())
        else:
            _assign(cfg, key, value)


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(item, "override must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


@dataclass(frozen=True)
class RunConfig:
    data: dict

    def __getitem__(self, key: str):
        sec, _, name = key.rpartition(".")
        return self.data[name] if sec == "" else self.data[sec][name]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def task(self) -> str:
        return self.data["task"]

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.data, sort_keys=True).encode()).hexdigest()[:16]

    def grammar_config(self) -> GrammarConfig:
        g = self.data["grammar"]
        bases = list(TASK_BASES[self.task])
        operants = bases if g["operants"] == "base" else dsl.operant_names(bases)
        return GrammarConfig(max_height=g["max_height"], grouping=tuple(g["grouping"]), unary=tuple(g["unary"]),
                             binary=tuple(g["binary"]), operants=tuple(operants),
                             allow_centralize=g["allow_centralize"], n_rows=g["n_samples"])

    def search_config(self) -> SearchConfig:
        s, sel, ev = self.data["search"], self.data["selection"], self.data["evaluator"]
        return SearchConfig(epochs=s["epochs"], samples_per_epoch=s["samples_per_epoch"], lr=s["lr"],
                            baseline_decay=s["baseline_decay"], pool_size=sel["pool_size"],
                            reward_mode=s["reward_mode"], single_split=s["single_split"],
                            search_epochs=s["fold_epochs"], select_epochs=sel["fold_epochs"],
                            final_epochs=ev["final_epochs"], strategy=sel["strategy"],
                            test_domain=s["test_domain"], record_wall_time=s["record_wall_time"])

    def train_config(self) -> TrainConfig:
        ev = self.data["evaluator"]
        return TrainConfig(epochs=ev["final_epochs"], lr=ev["lr"], weight_decay=ev["weight_decay"],
                           lambda_sup=ev["lambda_sup"], hidden=tuple(ev["hidden"]), target_clip=ev["target_clip"])

    def domain_specs(self) -> list[synthgen.DomainSpec]:
        sg = self.data["synthgen"]
        if self.task == "primitive":
            return synthgen.default_primitive_specs(sg["shapes_count"], sg["points_per_shape"], sg["noise"])
        return synthgen.default_mobility_specs(sg["shapes_count"], sg["points_per_shape"])


def _validate(cfg: dict) -> None:
    if cfg["task"] not in synthgen.TASKS:
        raise ConfigError("task", f"must be one of {list(synthgen.TASKS)}")
    if cfg["threads"] < 1:
        raise ConfigError("threads", "must be >= 1")
    g = cfg["grammar"]
    if g["operants"] not in ("full", "base"):
        raise ConfigError("grammar.operants", "must be 'full' or 'base'")
    if g["radius"] <= 0:
        raise ConfigError("grammar.radius", "must be > 0")
    if g["n_samples"] < 1:
        raise ConfigError("grammar.n_samples", "must be >= 1")
    for key, lo in (("search.epochs", 1), ("search.samples_per_epoch", 1), ("search.fold_epochs", 1),
                    ("selection.pool_size", 3), ("selection.fold_epochs", 1), ("evaluator.final_epochs", 1),
                    ("synthgen.shapes_count", 1), ("synthgen.points_per_shape", 4), ("evaluator.knn", 1)):
        sec, name = key.split(".")
        if cfg[sec][name] < lo:
            raise ConfigError(key, f"must be >= {lo}")
    if cfg["search"]["reward_mode"] not in ("gap", "val"):
        raise ConfigError("search.reward_mode", "must be 'gap' or 'val'")
    if cfg["evaluator"]["lambda_sup"] < 0:
        raise ConfigError("evaluator.lambda_sup", "must be >= 0")
    if cfg["synthgen"]["noise"] < 0:
        raise ConfigError("synthgen.noise", "must be >= 0")
    rc = RunConfig(cfg)
    for key, build in (("grammar", rc.grammar_config), ("selection.strategy", rc.search_config),
                       ("evaluator", rc.train_config)):
        try:
            build()
        except (ValueError, TypeError) as exc:
            raise ConfigError(key, str(exc)) from exc


def parse_config(text: str | None = None, overrides: list[str] = ()) -> RunConfig:
    """Defaults, then the JSON document ``text``, then ``key=value`` overrides."""
    cfg = defaults()
    if text is not None and text.strip():
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<document>", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}")
        _merge(cfg, doc)
    for item in overrides:
        key, value = parse_override(item)
        _assign(cfg, key, value)
    _validate(cfg)
    return RunConfig(cfg)


def load_config(path: str | None, overrides: list[str] = ()) -> RunConfig:
    text = None
    if path:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError("--config", str(exc))
    return parse_config(text, overrides)

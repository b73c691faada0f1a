"""Tree-structured conditional multinomials over operation trees.

Every sampling decision lives at a node keyed by its context path, i.e. the
choices made by all ancestors plus the slot being filled. Nodes are stored as
unconstrained logits and created lazily; an absent node is uniform.

Sampling order inside a mid cell is grouping, then unary given grouping, then
connection given both. A leaf cell samples its unary, then its operant.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import dsl
from .dsl import Leaf, Mid, Pair, Single

CHECKPOINT_MAGIC = "AGPS"
CHECKPOINT_VERSION = 1
MAX_SAMPLE_ATTEMPTS = 64
MAX_ENUMERATION = 10**6

FULL_GROUPING = ("sum", "mean", "max", "svd")
FULL_UNARY = ("identity", "square", "double", "neg", "orth", "inv", "centralize")
FULL_BINARY = ("add", "minus", "mul", "cross", "cartesian", "matvec")
REDUCED_UNARY = ("identity", "square", "double", "neg")
REDUCED_BINARY = ("add", "minus", "mul")


class GrammarError(ValueError):
    pass


class ConfigError(GrammarError):
    pass


class SamplingExhausted(GrammarError):
    pass


class UnknownChoice(GrammarError):
    pass


class EnumerationTooLarge(GrammarError):
    pass


class NonFiniteReward(GrammarError):
    pass


class CorruptCheckpoint(GrammarError):
    pass


@dataclass(frozen=True)
class GrammarConfig:
    max_height: int = 3
    grouping: tuple[str, ...] = FULL_GROUPING
    unary: tuple[str, ...] = FULL_UNARY
    binary: tuple[str, ...] = FULL_BINARY
    operants: tuple[str, ...] = ("P", "N", "P_mul_N", "P_add_N", "P_minus_N", "N_minus_P", "cross_N_P")
    operant_dims: tuple[int, ...] | None = None  # defaults to 3 for every operant
    allow_centralize: bool = True
    n_rows: int | None = 32

    def __post_init__(self):
        if self.max_height not in (2, 3):
            raise ConfigError(f"max_height must be 2 or 3, got {self.max_height}")
        for name in ("grouping", "unary", "operants"):
            if not getattr(self, name):
                raise ConfigError(f"{name} candidate list is empty")
        # an empty binary list is allowed: connections collapse to a single leaf
        for op in self.grouping:
            if op not in dsl.GROUPING_OPS:
                raise ConfigError(f"unknown grouping operator {op!r}")
        for op in self.unary:
            if op not in dsl.UNARY_OPS:
                raise ConfigError(f"unknown unary operator {op!r}")
        for op in self.binary:
            if op not in dsl.BINARY_OPS:
                raise ConfigError(f"unknown binary operator {op!r}")
        if not self.unary_choices:
            raise ConfigError("unary candidate list is empty once centralize is removed")
        if self.operant_dims is not None and len(self.operant_dims) != len(self.operants):
            raise ConfigError("operant_dims must match operants")

    @property
    def unary_choices(self) -> tuple[str, ...]:
        if self.allow_centralize:
            return tuple(self.unary)
        return tuple(u for u in self.unary if u != "centralize")

    @property
    def dims(self) -> dict[str, int]:
        dims = self.operant_dims or (3,) * len(self.operants)
        return dict(zip(self.operants, dims))

    def connection_choices(self, level: int) -> tuple[str, ...]:
        out = ["leaf"]
        out += [f"{b}(leaf,leaf)" for b in self.binary]
        if level >= 3:
            out += [f"{b}(mid,leaf)" for b in self.binary]
            out += [f"{b}(leaf,mid)" for b in self.binary]
        return tuple(out)

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    @classmethod
    def mini(cls) -> "GrammarConfig":
        """Small all-shape-valid grammar used for exhaustive checks."""
        return cls(
            grouping=("sum", "mean"),
            unary=("identity", "square"),
            binary=("add",),
            operants=("P", "N"),
        )


@dataclass
class Node:
    choices: tuple[str, ...]
    logits: np.ndarray


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max())
    return z / z.sum()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max()
    return logits - (m + math.log(np.exp(logits - m).sum()))


@dataclass
class DistributionSpace:
    config: GrammarConfig
    nodes: dict[str, Node] = field(default_factory=dict)

    def log_probs(self, path: str, choices: tuple[str, ...]) -> np.ndarray:
        node = self.nodes.get(path)
        if node is None:
            return np.full(len(choices), -math.log(len(choices)))
        if node.choices != choices:
            raise CorruptCheckpoint(f"node {path} has choices {node.choices}, expected {choices}")
        return log_softmax(node.logits)

    def probs(self, path: str, choices: tuple[str, ...]) -> np.ndarray:
        return np.exp(self.log_probs(path, choices))

    def node(self, path: str, choices: tuple[str, ...]) -> Node:
        node = self.nodes.get(path)
        if node is None:
            node = Node(choices, np.zeros(len(choices)))
            self.nodes[path] = node
        return node


@dataclass
class ReinforceState:
    lr: float = 0.1
    decay: float = 0.9
    baseline: float | None = None  # set to the first reward seen

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0 < self.decay < 1:
            raise ConfigError("decay must lie in (0, 1)")


def new_space(config: GrammarConfig) -> DistributionSpace:
    return DistributionSpace(config)


# ---------------------------------------------------------------------------
# traces: the ordered (path, choices, chosen index) decisions behind a tree

Step = tuple[str, tuple[str, ...], int]


def _index(choices: tuple[str, ...], value: str, path: str) -> int:
    try:
        return choices.index(value)
    except ValueError:
        raise UnknownChoice(f"{value!r} is not a choice at {path}") from None


def _conn_label(conn, level: int) -> str:
    if isinstance(conn, Single):
        if not isinstance(conn.child, Leaf):
            raise UnknownChoice("single connection must hold a leaf")
        return "leaf"
    kinds = ["mid" if isinstance(c, Mid) else "leaf" for c in (conn.left, conn.right)]
    return f"{conn.binary}({kinds[0]},{kinds[1]})"


def trace(config: GrammarConfig, tree: Mid) -> list[Step]:
    """Sampling decisions that produce ``tree`` under ``config``."""
    steps: list[Step] = []
    _trace_mid(config, tree, config.max_height, "/", steps)
    return steps


def _trace_mid(config: GrammarConfig, cell, level: int, prefix: str, steps: list[Step]) -> None:
    if not isinstance(cell, Mid) or level < 2:
        raise UnknownChoice(f"mid cell expected at {prefix}")
    gpath = prefix + "g"
    steps.append((gpath, config.grouping, _index(config.grouping, cell.grouping, gpath)))
    upath = f"{prefix}g={cell.grouping}/u"
    steps.append((upath, config.unary_choices, _index(config.unary_choices, cell.unary, upath)))
    cpath = f"{prefix}g={cell.grouping}/u={cell.unary}/c"
    choices = config.connection_choices(level)
    label = _conn_label(cell.conn, level)
    steps.append((cpath, choices, _index(choices, label, cpath)))
    child_prefix = f"{cpath}={label}/"
    if isinstance(cell.conn, Single):
        _trace_leaf(config, cell.conn.child, child_prefix + "S/", steps)
        return
    for side, child in (("L", cell.conn.left), ("R", cell.conn.right)):
        if isinstance(child, Mid):
            _trace_mid(config, child, level - 1, f"{child_prefix}{side}/", steps)
        else:
            _trace_leaf(config, child, f"{child_prefix}{side}/", steps)


def _trace_leaf(config: GrammarConfig, leaf: Leaf, prefix: str, steps: list[Step]) -> None:
    upath = prefix + "u"
    steps.append((upath, config.unary_choices, _index(config.unary_choices, leaf.unary, upath)))
    opath = f"{prefix}u={leaf.unary}/o"
    steps.append((opath, config.operants, _index(config.operants, leaf.operant, opath)))


def log_prob(space: DistributionSpace, tree: Mid) -> float:
    """Sum of log conditional probabilities along the sampling order."""
    total = 0.0
    for path, choices, idx in trace(space.config, tree):
        total += float(space.log_probs(path, choices)[idx])
    return total


# ---------------------------------------------------------------------------
# sampling


def _draw(space: DistributionSpace, path: str, choices: tuple[str, ...], rng: np.random.Generator) -> str:
    p = space.probs(path, choices)
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return choices[min(idx, len(choices) - 1)]


def _sample_mid(space, level: int, prefix: str, rng) -> Mid:
    cfg = space.config
    g = _draw(space, prefix + "g", cfg.grouping, rng)
    u = _draw(space, f"{prefix}g={g}/u", cfg.unary_choices, rng)
    cpath = f"{prefix}g={g}/u={u}/c"
    label = _draw(space, cpath, cfg.connection_choices(level), rng)
    child_prefix = f"{cpath}={label}/"
    if label == "leaf":
        return Mid(level, u, g, Single(_sample_leaf(space, child_prefix + "S/", rng)))
    binary, kinds = label[:-1].split("(")
    left_kind, right_kind = kinds.split(",")
    children = []
    for side, kind in (("L", left_kind), ("R", right_kind)):
        if kind == "mid":
            children.append(_sample_mid(space, level - 1, f"{child_prefix}{side}/", rng))
        else:
            children.append(_sample_leaf(space, f"{child_prefix}{side}/", rng))
    return Mid(level, u, g, Pair(binary, children[0], children[1]))


def _sample_leaf(space, prefix: str, rng) -> Leaf:
    u = _draw(space, prefix + "u", space.config.unary_choices, rng)
    o = _draw(space, f"{prefix}u={u}/o", space.config.operants, rng)
    return Leaf(u, o)


def sample_tree(space: DistributionSpace, rng: np.random.Generator) -> tuple[Mid, float]:
    """Draw a shape-valid tree top-down; rejects invalid draws up to 64 times.

    The returned log-probability is not renormalized over valid trees.
    """
    cfg = space.config
    for _ in range(MAX_SAMPLE_ATTEMPTS):
        tree = _sample_mid(space, cfg.max_height, "/", rng)
        try:
            dsl.infer_shape(tree, cfg.dims, cfg.n_rows)
        except dsl.ShapeError:
            continue
        return tree, log_prob(space, tree)
    raise SamplingExhausted(f"{MAX_SAMPLE_ATTEMPTS} consecutive shape-invalid draws")


# ---------------------------------------------------------------------------
# REINFORCE


def reinforce_update(space: DistributionSpace, state: ReinforceState, tree: Mid, reward: float) -> None:
    """Gradient ascent on (r - b) log p(tree) in logit space, then move the baseline.

    Mutates ``space`` and ``state`` in place.
    """
    if not math.isfinite(reward):
        raise NonFiniteReward(f"reward {reward!r}")
    steps = trace(space.config, tree)
    if state.baseline is None:
        state.baseline = float(reward)
    advantage = reward - state.baseline
    if advantage != 0.0:
        # all gradients from pre-update logits; each path appears once per trace
        grads = []
        for path, choices, idx in steps:
            p = space.probs(path, choices)
            onehot = np.zeros(len(choices))
            onehot[idx] = 1.0
            grads.append((path, choices, onehot - p))
        for path, choices, g in grads:
            node = space.node(path, choices)
            node.logits = node.logits + state.lr * advantage * g
    state.baseline = state.decay * state.baseline + (1.0 - state.decay) * reward


# ---------------------------------------------------------------------------
# enumeration


def count_trees(config: GrammarConfig) -> int:
    n_g, n_u, n_b = len(config.grouping), len(config.unary_choices), len(config.binary)
    leaves = n_u * len(config.operants)
    mid2 = n_g * n_u * (leaves + n_b * leaves * leaves)
    if config.max_height == 2:
        return mid2
    return n_g * n_u * (leaves + n_b * (leaves * leaves + 2 * mid2 * leaves))


def _iter_leaves(config) -> Iterator[Leaf]:
    for u in config.unary_choices:
        for o in config.operants:
            yield Leaf(u, o)


def _iter_mids(config, level: int) -> Iterator[Mid]:
    for g in config.grouping:
        for u in config.unary_choices:
            for label in config.connection_choices(level):
                if label == "leaf":
                    for leaf in _iter_leaves(config):
                        yield Mid(level, u, g, Single(leaf))
                    continue
                binary, kinds = label[:-1].split("(")
                lk, rk = kinds.split(",")
                lefts = list(_iter_mids(config, level - 1)) if lk == "mid" else list(_iter_leaves(config))
                rights = list(_iter_mids(config, level - 1)) if rk == "mid" else list(_iter_leaves(config))
                for a in lefts:
                    for b in rights:
                        yield Mid(level, u, g, Pair(binary, a, b))


def enumerate_trees(space: DistributionSpace) -> list[tuple[Mid, float]]:
    """Every tree of the grammar (shape-valid or not) with its probability."""
    n = count_trees(space.config)
    if n > MAX_ENUMERATION:
        raise EnumerationTooLarge(f"{n} trees exceed the limit of {MAX_ENUMERATION}")
    return [(t, math.exp(log_prob(space, t))) for t in _iter_mids(space.config, space.config.max_height)]


# ---------------------------------------------------------------------------
# checkpoints


def save_space(space: DistributionSpace, baseline: float | None = None) -> bytes:
    lines = [
        "{",
        f'"magic":{json.dumps(CHECKPOINT_MAGIC)},',
        f'"version":{CHECKPOINT_VERSION},',
        f'"config_digest":{json.dumps(space.config.digest())},',
        f'"baseline":{"null" if baseline is None else format(baseline, ".17g")},',
        '"nodes":[',
    ]
    entries = []
    for path, node in space.nodes.items():
        logits = ",".join(format(float(x), ".17g") for x in node.logits)
        entries.append(
            f'{{"path":{json.dumps(path)},"choices":{json.dumps(list(node.choices))},"logits":[{logits}]}}'
        )
    lines.append(",\n".join(entries))
    lines.append("]}")
    return ("\n".join(lines) + "\n").encode()


def load_checkpoint(data: bytes, config: GrammarConfig) -> tuple[DistributionSpace, float | None]:
    try:
        doc = json.loads(data.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable checkpoint: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("magic") != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("bad magic")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"unsupported version {doc.get('version')!r}")
    if doc.get("config_digest") != config.digest():
        raise CorruptCheckpoint("config digest does not match the grammar config")
    space = DistributionSpace(config)
    try:
        for entry in doc["nodes"]:
            choices = tuple(entry["choices"])
            logits = np.array([float(x) for x in entry["logits"]], dtype=np.float64)
            if len(logits) != len(choices):
                raise CorruptCheckpoint(f"node {entry['path']}: logits/choices length mismatch")
            space.nodes[entry["path"]] = Node(choices, logits)
        baseline = doc["baseline"]
    except (KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"malformed node list: {exc}") from exc
    return space, (None if baseline is None else float(baseline))


def load_space(data: bytes, config: GrammarConfig) -> DistributionSpace:
    return load_checkpoint(data, config)[0]

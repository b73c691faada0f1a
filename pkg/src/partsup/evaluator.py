"""Reference segmentation model and the cross-validated generalization reward.

The model is a two-hidden-layer MLP over per-point descriptors with a
segmentation head and one linear regression head per active supervision
tree. Gradients are hand-written; training uses Adam with L2 weight decay.
Everything runs in float64.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import dsl
from .synthgen import PartDataset, Shape


class EvaluatorError(ValueError):
    pass


class MissingChannel(EvaluatorError):
    pass


class DimMismatch(EvaluatorError):
    pass


class NonFiniteLoss(EvaluatorError):
    pass


class SupervisionError(EvaluatorError):
    def __init__(self, tree: str, cause: Exception):
        super().__init__(f"supervision {tree!r} failed: {cause}")
        self.tree = tree
        self.cause = cause


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    lr: float = 5e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    lambda_sup: float = 1.0
    hidden: tuple[int, int] = (64, 64)
    target_clip: float = 10.0

    def __post_init__(self):
        if self.epochs < 1:
            raise EvaluatorError("epochs must be >= 1")
        if not (self.lr > 0 and self.eps > 0 and self.weight_decay >= 0 and self.lambda_sup >= 0):
            raise EvaluatorError("lr and eps must be positive; weight_decay and lambda_sup non-negative")
        if not all(0 < b < 1 for b in self.betas):
            raise EvaluatorError("betas must lie in (0, 1)")


# ---------------------------------------------------------------------------
# descriptors and prepared data

TASK_CHANNEL = {"primitive": "normals", "mobility": "flow"}
TASK_BASES = {"primitive": ("P", "N"), "mobility": ("P", "F")}
N_PRIM_TYPES = 4


def featurize(shape: Shape, task: str = "primitive", knn: int = 16) -> np.ndarray:
    """Per-point descriptors.

    Position and the task channel (normals or flow), each followed by its
    16-nearest-neighbor mean offset and ascending covariance eigenvalues.
    Neighbors come from the whole shape; part labels are never used.
    """
    channel = getattr(shape, TASK_CHANNEL[task])
    if channel is None:
        raise MissingChannel(f"{task} task needs the {TASK_CHANNEL[task]} channel")
    pos = shape.positions
    k = min(knn, len(pos))
    _, idx = cKDTree(pos).query(pos, k=k)
    idx = idx.reshape(len(pos), k)
    cols = []
    for x in (pos, channel):
        offset, eig = _local_stats(x, idx)
        cols += [x, offset, eig]
    return np.concatenate(cols, axis=1)


def _local_stats(x: np.ndarray, idx: np.ndarray):
    nb = x[idx]
    mean = nb.mean(axis=1)
    centered = nb - mean[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / idx.shape[1]
    return mean - x, np.clip(np.linalg.eigvalsh(cov), 0.0, None)


def seg_labels(shape: Shape, task: str) -> np.ndarray:
    # primitive task: per-point primitive type; mobility: canonical motion rank
    if task == "primitive":
        return shape.prim_types.astype(np.int64)
    return shape.part_labels.astype(np.int64)


@dataclass(eq=False)
class PreparedShape:
    desc: np.ndarray
    labels: np.ndarray
    base: dict[str, np.ndarray]
    neighbors: np.ndarray

    def operants(self, base_only: bool = False) -> dict[str, np.ndarray]:
        gathered = {name: arr[self.neighbors] for name, arr in self.base.items()}
        if base_only:
            return gathered
        return dsl.build_operant_set(gathered)


class TaskData:
    """Dataset with descriptors, labels and part-aware neighbor tables precomputed.

    Neighbor tables are drawn once per build from a seeded stream per shape.
    Supervision targets are memoized per tree text (bounded LRU).
    """

    def __init__(self, ds: PartDataset, radius: float = 0.5, n_samples: int = 32, knn: int = 16,
                 seed: int = 0, base_only: bool = False, cache_trees: int = 24):
        self.task = ds.task
        if ds.task == "primitive":
            self.n_classes = N_PRIM_TYPES
        else:
            self.n_classes = max(2, 1 + max(int(s.part_labels.max()) for v in ds.domains.values() for s in v))
        self.base_only = base_only
        self.domains: dict[str, list[PreparedShape]] = {}
        for di, (name, shapes) in enumerate(ds.domains.items()):
            prepared = []
            for si, s in enumerate(shapes):
                rng = np.random.default_rng([seed, di, si])
                nbr = dsl.part_neighbor_table(s.positions, s.part_labels, radius, n_samples, rng)
                bases = TASK_BASES[ds.task]
                base = {"P": s.positions, bases[1]: getattr(s, TASK_CHANNEL[ds.task])}
                prepared.append(PreparedShape(featurize(s, ds.task, knn), seg_labels(s, ds.task), base, nbr))
            self.domains[name] = prepared
        self._cache: OrderedDict[str, dict[int, np.ndarray]] = OrderedDict()
        self._cache_trees = cache_trees

    @property
    def domain_names(self) -> list[str]:
        return list(self.domains)

    @property
    def operant_dims(self) -> dict[str, int]:
        any_shape = next(iter(self.domains.values()))[0]
        return {k: v.shape[-1] for k, v in any_shape.operants(self.base_only).items()}

    def targets(self, tree: dsl.Mid, shape: PreparedShape) -> np.ndarray:
        key = dsl.print_tree(tree)
        per_tree = self._cache.get(key)
        if per_tree is None:
            per_tree = {}
            self._cache[key] = per_tree
            while len(self._cache) > self._cache_trees:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(key)
        out = per_tree.get(id(shape))
        if out is None:
            try:
                out = dsl.evaluate_batch(tree, shape.operants(self.base_only))
            except (dsl.DSLError, KeyError) as exc:
                raise SupervisionError(key, exc) from exc
            per_tree[id(shape)] = out
        return out


# ---------------------------------------------------------------------------
# model


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    clip: float | None = None

    @classmethod
    def fit(cls, blocks: Sequence[np.ndarray], clip: float | None = None) -> "Standardizer":
        x = np.concatenate(blocks, axis=0)
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean, std, clip)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mean) / self.std
        return z if self.clip is None else np.clip(z, -self.clip, self.clip)


class EvalModel:
    """MLP ``D -> h1 -> h2`` (ReLU) with a segmentation head and supervision heads."""

    def __init__(self, in_dim: int, n_classes: int, sup_dims: Sequence[int] = (), hidden=(64, 64), seed: int = 0):
        body = np.random.default_rng([seed, 0])
        heads = np.random.default_rng([seed, 1])
        h1, h2 = hidden
        self.params: dict[str, np.ndarray] = {
            "W1": body.normal(scale=np.sqrt(2.0 / in_dim), size=(in_dim, h1)),
            "b1": np.zeros(h1),
            "W2": body.normal(scale=np.sqrt(2.0 / h1), size=(h1, h2)),
            "b2": np.zeros(h2),
            "Wc": body.normal(scale=np.sqrt(1.0 / h2), size=(h2, n_classes)),
            "bc": np.zeros(n_classes),
        }
        for j, s in enumerate(sup_dims):
            self.params[f"Ws{j}"] = heads.normal(scale=np.sqrt(1.0 / h2), size=(h2, s))
            self.params[f"bs{j}"] = np.zeros(s)
        self.n_sup = len(sup_dims)
        self.input_norm: Standardizer | None = None

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return x if self.input_norm is None else self.input_norm(x)

    def forward(self, x: np.ndarray):
        p = self.params
        z1 = x @ p["W1"] + p["b1"]
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ p["W2"] + p["b2"]
        a2 = np.maximum(z2, 0.0)
        logits = a2 @ p["Wc"] + p["bc"]
        sups = [a2 @ p[f"Ws{j}"] + p[f"bs{j}"] for j in range(self.n_sup)]
        return logits, sups, (x, z1, a1, z2, a2)

    def predict(self, desc: np.ndarray) -> np.ndarray:
        logits, _, _ = self.forward(self.normalize(desc))
        return np.argmax(logits, axis=1)

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray, targets: Sequence[np.ndarray], lambda_sup: float):
        """Mean cross-entropy plus lambda * sum of per-head mean squared errors."""
        p = self.params
        if len(targets) != self.n_sup:
            raise DimMismatch(f"{len(targets)} targets for {self.n_sup} heads")
        logits, sups, (x, z1, a1, z2, a2) = self.forward(x)
        n = len(x)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = -logp[np.arange(n), y].mean()
        dlogits = np.exp(logp)
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
        grads = {"Wc": a2.T @ dlogits, "bc": dlogits.sum(axis=0)}
        da2 = dlogits @ p["Wc"].T
        if lambda_sup != 0.0:
            for j, (pred, tgt) in enumerate(zip(sups, targets)):
                if pred.shape != tgt.shape:
                    raise DimMismatch(f"head {j}: prediction {pred.shape} vs target {tgt.shape}")
                diff = pred - tgt
                loss += lambda_sup * np.mean(diff * diff)
                dpred = lambda_sup * 2.0 * diff / diff.size
                grads[f"Ws{j}"] = a2.T @ dpred
                grads[f"bs{j}"] = dpred.sum(axis=0)
                da2 = da2 + dpred @ p[f"Ws{j}"].T
        else:
            for j in range(self.n_sup):
                grads[f"Ws{j}"] = np.zeros_like(p[f"Ws{j}"])
                grads[f"bs{j}"] = np.zeros_like(p[f"bs{j}"])
        dz2 = da2 * (z2 > 0)
        grads["W2"] = a1.T @ dz2
        grads["b2"] = dz2.sum(axis=0)
        dz1 = (dz2 @ p["W2"].T) * (z1 > 0)
        grads["W1"] = x.T @ dz1
        grads["b1"] = dz1.sum(axis=0)
        return float(loss), grads

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            if self.wd:
                g = g + self.wd * params[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            m_hat = self.m[k] / c1
            v_hat = self.v[k] / c2
            params[k] = params[k] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# metric


def shape_iou(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-class IoU; NaN for classes absent from both prediction and truth."""
    out = np.full(n_classes, np.nan)
    for c in range(n_classes):
        p, g = pred == c, gt == c
        union = np.count_nonzero(p | g)
        if union:
            out[c] = np.count_nonzero(p & g) / union
    return out


def miou_labels(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], n_classes: int) -> float:
    if not preds:
        return 0.0
    return float(np.mean([np.nanmean(shape_iou(p, g, n_classes)) for p, g in zip(preds, gts)]))


def miou(model: EvalModel, shapes: Sequence[PreparedShape], n_classes: int) -> float:
    return miou_labels([model.predict(s.desc) for s in shapes], [s.labels for s in shapes], n_classes)


def per_class_iou(model: EvalModel, shapes: Sequence[PreparedShape], n_classes: int) -> list[float | None]:
    ious = np.array([shape_iou(model.predict(s.desc), s.labels, n_classes) for s in shapes])
    with np.errstate(all="ignore"):
        means = [float(np.nanmean(col)) if np.any(~np.isnan(col)) else None for col in ious.T]
    return means


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    train_miou: list[float] = field(default_factory=list)
    val_miou: list[float] = field(default_factory=list)
    best_epoch: int = 0
    target_mean: list[list[float]] = field(default_factory=list)
    target_std: list[list[float]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def build_model(data: TaskData, train_shapes: Sequence[PreparedShape], trees: Sequence[dsl.Mid],
                cfg: TrainConfig, seed: int):
    """Fresh model with input normalization and target standardizers fitted on ``train_shapes``."""
    raw = [[data.targets(t, s) for s in train_shapes] for t in trees]
    stds = [Standardizer.fit(blocks, cfg.target_clip) for blocks in raw]
    model = EvalModel(train_shapes[0].desc.shape[1], data.n_classes, [r[0].shape[1] for r in raw], cfg.hidden, seed)
    model.input_norm = Standardizer.fit([s.desc for s in train_shapes])
    targets = [[std(block) for block in blocks] for std, blocks in zip(stds, raw)]
    return model, targets, stds


def train(model: EvalModel, shapes: Sequence[PreparedShape], targets: Sequence[Sequence[np.ndarray]],
          cfg: TrainConfig, seed: int, n_classes: int, val_shapes: Sequence[PreparedShape] = (),
          track_train: bool = True, keep_best: bool = False) -> TrainReport:
    """Adam over one shape per step, seeded shape order each epoch.

    ``targets[j][i]`` is the standardized target of tree j on shape i. After
    every epoch the train/val MIoU is recorded; the best-val epoch (earliest
    on ties) is reported and, with ``keep_best``, its parameters restored.
    """
    opt = Adam(model.params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng([seed, 2])
    report = TrainReport()
    best_val, best_params = -np.inf, None
    xs = [model.normalize(s.desc) for s in shapes]
    for epoch in range(cfg.epochs):
        total = 0.0
        for i in rng.permutation(len(shapes)):
            loss, grads = model.loss_and_grads(xs[i], shapes[i].labels, [t[i] for t in targets], cfg.lambda_sup)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}, shape {i}: loss {loss}")
            opt.step(model.params, grads)
            total += loss
        report.losses.append(total / len(shapes))
        if track_train:
            report.train_miou.append(miou(model, shapes, n_classes))
        if val_shapes:
            v = miou(model, val_shapes, n_classes)
            report.val_miou.append(v)
            if v > best_val:
                best_val, report.best_epoch = v, epoch
                if keep_best:
                    best_params = model.snapshot()
    if keep_best and best_params is not None:
        model.params = best_params
    return report


# ---------------------------------------------------------------------------
# cross-validated reward


@dataclass
class GapReward:
    gap: float
    val_metric: float
    train_metric: float
    folds: list[dict] = field(default_factory=list)

    def reward(self, mode: str = "gap") -> float:
        if mode == "gap":
            return self.gap
        if mode == "val":
            return self.val_metric
        raise EvaluatorError(f"unknown reward mode {mode!r}")


def train_validation(data: TaskData, trees: Sequence[dsl.Mid], train_domains: Sequence[str],
                     val_domain: str, cfg: TrainConfig, seed: int) -> dict:
    train_shapes = [s for d in train_domains for s in data.domains[d]]
    val_shapes = data.domains[val_domain]
    model, targets, stds = build_model(data, train_shapes, trees, cfg, seed)
    report = train(model, train_shapes, targets, cfg, seed, data.n_classes, val_shapes)
    e = report.best_epoch
    return {
        "val_domain": val_domain,
        "best_epoch": e,
        "val": report.val_miou[e],
        "train": report.train_miou[e],
        "gap": report.val_miou[e] - report.train_miou[e],
        "target_mean": [s.mean.tolist() for s in stds],
        "target_std": [s.std.tolist() for s in stds],
    }


def cross_val_gap(data: TaskData, trees: Sequence[dsl.Mid], domains: Sequence[str], cfg: TrainConfig,
                  seed: int = 0, single_split: bool = False, executor=None) -> GapReward:
    """Leave-one-domain-out folds; mean (val - train) MIoU at each fold's best-val epoch.

    Fold i trains a fresh model seeded by (seed, i). ``single_split`` keeps only
    the first fold. Results are reduced in fold order.
    """
    if len(domains) < 2:
        raise EvaluatorError("cross-validation needs at least two domains")
    folds = range(1 if single_split else len(domains))

    def run(i):
        rest = [d for j, d in enumerate(domains) if j != i]
        return train_validation(data, trees, rest, domains[i], cfg, seed * 1000 + i)

    results = list(executor.map(run, folds)) if executor is not None else [run(i) for i in folds]
    return GapReward(
        gap=float(np.mean([r["gap"] for r in results])),
        val_metric=float(np.mean([r["val"] for r in results])),
        train_metric=float(np.mean([r["train"] for r in results])),
        folds=results,
    )

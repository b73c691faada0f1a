"""Propose / evaluate / update search, supervision selection and final training."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import dsl, grammar
from .evaluator import (
    EvaluatorError,
    SupervisionError,
    TaskData,
    TrainConfig,
    build_model,
    cross_val_gap,
    miou,
    per_class_iou,
    train,
)
from .grammar import DistributionSpace, GrammarConfig, ReinforceState

log = logging.getLogger(__name__)

EVENTS_FILE = "events.ndjson"
STATE_FILE = "state"


class SearchError(grammar.ConfigError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    epochs: int = 30
    samples_per_epoch: int = 4
    lr: float = 0.1
    baseline_decay: float = 0.9
    pool_size: int = 8
    reward_mode: str = "gap"
    single_split: bool = False
    search_epochs: int = 1
    select_epochs: int = 5
    final_epochs: int = 20
    strategy: str = "greedy"
    test_domain: int = -1
    record_wall_time: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise SearchError("epochs must be >= 1")
        if self.samples_per_epoch < 1:
            raise SearchError("samples_per_epoch must be >= 1")
        if self.pool_size < 3:
            raise SearchError("pool_size must be >= 3")
        if self.reward_mode not in ("gap", "val"):
            raise SearchError(f"reward_mode must be 'gap' or 'val', got {self.reward_mode!r}")
        if self.search_epochs < 1 or self.select_epochs < 1 or self.final_epochs < 1:
            raise SearchError("training epoch counts must be >= 1")
        parse_strategy(self.strategy)


def parse_strategy(text: str) -> tuple[str, int]:
    if text == "greedy":
        return "greedy", 3
    if text.startswith("topk:"):
        try:
            k = int(text[5:])
        except ValueError:
            k = 0
        if 1 <= k <= 3:
            return "topk", k
    raise SearchError(f"strategy must be 'greedy' or 'topk:K' with 1 <= K <= 3, got {text!r}")


def split_domains(data: TaskData, test_domain: int) -> tuple[list[str], str]:
    names = data.domain_names
    test = names[test_domain]
    train_names = [n for n in names if n != test]
    if len(train_names) < 2:
        raise SearchError("need at least two training domains besides the test domain")
    return train_names, test


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# search loop


@dataclass
class SearchState:
    epoch: int
    space: DistributionSpace
    reinforce: ReinforceState
    events: list[dict] = field(default_factory=list)

    @property
    def rng_counter(self) -> int:
        # sampling streams are keyed by (seed, epoch), so the epoch count is the whole RNG state
        return self.epoch


RewardFn = Callable[[dsl.Mid, int, int], tuple[float, float, float]]


def cross_val_reward(data: TaskData, cfg: SearchConfig, train_cfg: TrainConfig, seed: int, executor=None) -> RewardFn:
    train_names, _ = split_domains(data, cfg.test_domain)
    tcfg = replace(train_cfg, epochs=cfg.search_epochs)

    def fn(tree, epoch, sample):
        g = cross_val_gap(data, [tree], train_names, tcfg, _seed(seed, epoch, sample), cfg.single_split, executor)
        return g.reward(cfg.reward_mode), g.val_metric, g.train_metric

    return fn


def _write_checkpoint(out: Path, state: SearchState) -> None:
    (out / f"space_epoch_{state.epoch}").write_bytes(grammar.save_space(state.space, state.reinforce.baseline))
    side = {"epoch": state.epoch, "baseline": state.reinforce.baseline, "rng_counter": state.rng_counter}
    (out / STATE_FILE).write_text(json.dumps(side) + "\n")


def _append_events(out: Path, events: Sequence[dict]) -> None:
    with open(out / EVENTS_FILE, "a") as fh:
        for e in events:
            fh.write(json.dumps(e) + "\n")


def load_state(out: Path, gcfg: GrammarConfig, cfg: SearchConfig) -> SearchState | None:
    side_path = out / STATE_FILE
    if not side_path.exists():
        return None
    side = json.loads(side_path.read_text())
    epoch = int(side["epoch"])
    space, baseline = grammar.load_checkpoint((out / f"space_epoch_{epoch}").read_bytes(), gcfg)
    events = []
    if (out / EVENTS_FILE).exists():
        events = [json.loads(line) for line in (out / EVENTS_FILE).read_text().splitlines() if line.strip()]
    events = [e for e in events if e["epoch"] <= epoch]
    # drop records from a partially logged epoch so the file matches the checkpoint
    with open(out / EVENTS_FILE, "w") as fh:
        for e in events:
            fh.write(json.dumps(e) + "\n")
    reinforce = ReinforceState(cfg.lr, cfg.baseline_decay, baseline)
    return SearchState(epoch, space, reinforce, events)


def run_search(cfg: SearchConfig, gcfg: GrammarConfig, reward_fn: RewardFn, seed: int,
               out_dir: str | os.PathLike | None = None, resume: bool = False,
               stop_after: int | None = None) -> SearchState:
    """Run ``cfg.epochs`` epochs of sample / evaluate / REINFORCE update.

    Each epoch samples ``samples_per_epoch`` trees from a stream seeded by
    (seed, epoch), evaluates them, then applies updates in sample order. A
    sample whose supervision fails is logged as skipped and redrawn once; a
    second failure ends the epoch early. With ``out_dir`` the space, a state
    sidecar and the event log are written after every epoch; ``resume``
    continues from the last checkpoint there. ``stop_after`` halts after that
    many completed epochs (used to simulate interruption).
    """
    out = Path(out_dir) if out_dir is not None else None
    state = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume:
            state = load_state(out, gcfg, cfg)
        elif (out / EVENTS_FILE).exists():
            (out / EVENTS_FILE).unlink()
    if state is None:
        state = SearchState(0, grammar.new_space(gcfg), ReinforceState(cfg.lr, cfg.baseline_decay))
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    while state.epoch < last:
        epoch = state.epoch + 1
        rng = np.random.default_rng([seed, epoch])
        records, accepted = [], []
        for sample in range(cfg.samples_per_epoch):
            outcome = None
            for attempt in range(2):
                tree, logp = grammar.sample_tree(state.space, rng)
                text = dsl.print_tree(tree)
                t0 = time.perf_counter()
                try:
                    reward, val, tr = reward_fn(tree, epoch, sample)
                    if not math.isfinite(reward):
                        raise EvaluatorError(f"non-finite reward {reward}")
                except (SupervisionError, EvaluatorError, dsl.DSLError) as exc:
                    log.warning("epoch %d sample %d: skipped %s (%s)", epoch, sample, text, exc)
                    records.append({"epoch": epoch, "sample": sample, "tree": text, "logp": logp,
                                    "skipped": True, "error": str(exc)})
                    continue
                wall = int(1000 * (time.perf_counter() - t0)) if cfg.record_wall_time else 0
                outcome = {"epoch": epoch, "sample": sample, "tree": text, "logp": logp, "reward": reward,
                           "val": val, "train": tr, "wall_ms": wall}
                break
            if outcome is None:
                log.error("epoch %d: aborting after repeated supervision failures", epoch)
                break
            records.append(outcome)
            accepted.append((tree, outcome["reward"]))
        for tree, reward in accepted:
            grammar.reinforce_update(state.space, state.reinforce, tree, reward)
        state.epoch = epoch
        state.events.extend(records)
        if out is not None:
            _append_events(out, records)
            _write_checkpoint(out, state)
        if accepted:
            log.info("epoch %d: mean reward %.4f", epoch, float(np.mean([r for _, r in accepted])))
    return state


def sample_events(events: Sequence[dict]) -> list[dict]:
    return [e for e in events if not e.get("skipped")]


# ---------------------------------------------------------------------------
# selection


@dataclass
class SupervisionSet:
    trees: tuple[dsl.Mid, ...]
    score: float

    def __post_init__(self):
        if not 1 <= len(self.trees) <= 3:
            raise SearchError("a supervision set holds 1 to 3 trees")

    @property
    def texts(self) -> list[str]:
        return [dsl.print_tree(t) for t in self.trees]

    def to_json(self) -> str:
        return json.dumps({"trees": self.texts, "score": self.score})


Scorer = Callable[[Sequence[dsl.Mid]], float]


def cross_val_scorer(data: TaskData, cfg: SearchConfig, train_cfg: TrainConfig, seed: int, executor=None) -> Scorer:
    train_names, _ = split_domains(data, cfg.test_domain)
    tcfg = replace(train_cfg, epochs=cfg.select_epochs)

    def score(trees):
        g = cross_val_gap(data, list(trees), train_names, tcfg, seed, cfg.single_split, executor)
        return g.reward(cfg.reward_mode)

    return score


def sort_by_cross_val(candidates: Sequence[Sequence[dsl.Mid]], scorer: Scorer) -> list[tuple[tuple[dsl.Mid, ...], float]]:
    """Score every candidate set and sort descending; ties keep input order.

    A candidate whose evaluation fails is scored -inf.
    """
    if not candidates:
        raise SearchError("no candidates to sort")
    scored = []
    for cand in candidates:
        cand = tuple(cand)
        try:
            s = float(scorer(cand))
            if math.isnan(s):
                raise EvaluatorError("nan score")
        except (SupervisionError, EvaluatorError, dsl.DSLError) as exc:
            log.warning("candidate %s failed: %s", [dsl.print_tree(t) for t in cand], exc)
            s = -math.inf
        scored.append((cand, s))
    return sorted(scored, key=lambda cs: -cs[1])


@dataclass
class SelectionResult:
    selected: SupervisionSet
    stages: list[list[tuple[tuple[dsl.Mid, ...], float]]]

    @property
    def evaluated(self) -> list[tuple[tuple[dsl.Mid, ...], float]]:
        return [c for stage in self.stages for c in stage]

    def to_json(self) -> str:
        return json.dumps({
            "trees": self.selected.texts,
            "score": self.selected.score,
            "stages": [[{"trees": [dsl.print_tree(t) for t in c], "score": s} for c, s in st] for st in self.stages],
        })


def sample_pool(space: DistributionSpace, k: int, rng: np.random.Generator,
                max_draws: int | None = None) -> list[tuple[dsl.Mid, float]]:
    """``k`` distinct trees drawn from ``space``."""
    max_draws = max_draws or 64 * k
    pool, seen = [], set()
    for _ in range(max_draws):
        tree, logp = grammar.sample_tree(space, rng)
        text = dsl.print_tree(tree)
        if text not in seen:
            seen.add(text)
            pool.append((tree, logp))
            if len(pool) == k:
                return pool
    raise grammar.SamplingExhausted(f"only {len(pool)} distinct trees in {max_draws} draws")


def _dedupe(sets):
    out, seen = [], set()
    for s in sets:
        key = frozenset(dsl.print_tree(t) for t in s)
        if len(key) == len(s) and key not in seen:
            seen.add(key)
            out.append(tuple(s))
    return out


def greedy_select(space: DistributionSpace, cfg: SearchConfig, scorer: Scorer, seed: int) -> SelectionResult:
    """Greedy 1 -> 2 -> 3 supervision selection from a freshly sampled pool.

    Stage 1 ranks K sampled singles. Stage 2 pairs the top 2 with the top
    K//2 singles; stage 3 extends the top 3 pairs with the top K//3 singles.
    Self-combinations and duplicate sets are dropped. The best stage winner
    is returned (earlier stage wins ties).
    """
    k = cfg.pool_size
    pool = sample_pool(space, k, np.random.default_rng([seed, 1_000_003]))
    t1 = sort_by_cross_val([(t,) for t, _ in pool], scorer)
    singles = [c[0] for c, _ in t1]
    pairs = _dedupe((a, b) for a in singles[:2] for b in singles[: k // 2])
    stages = [t1]
    log.info("selection: %d singles, %d pairs", len(t1), len(pairs))
    if pairs:
        t2 = sort_by_cross_val(pairs, scorer)
        stages.append(t2)
        triples = _dedupe(p + (c,) for p, _ in t2[:3] for c in singles[: k // 3])
        log.info("selection: %d triples", len(triples))
        if triples:
            stages.append(sort_by_cross_val(triples, scorer))
    winners = [st[0] for st in stages]
    best = sorted(winners, key=lambda cs: -cs[1])[0]
    return SelectionResult(SupervisionSet(best[0], best[1]), stages)


def topk_select(space: DistributionSpace, cfg: SearchConfig, scorer: Scorer, seed: int, k: int) -> SelectionResult:
    """Ablation: the ``k`` most probable trees of a sampled pool, scored once."""
    pool = sample_pool(space, cfg.pool_size, np.random.default_rng([seed, 1_000_003]))
    ranked = sorted(pool, key=lambda tl: -tl[1])[:k]
    chosen = tuple(t for t, _ in ranked)
    stage = sort_by_cross_val([chosen], scorer)
    return SelectionResult(SupervisionSet(chosen, stage[0][1]), [stage])


def select(space: DistributionSpace, cfg: SearchConfig, scorer: Scorer, seed: int) -> SelectionResult:
    kind, k = parse_strategy(cfg.strategy)
    if kind == "greedy":
        return greedy_select(space, cfg, scorer, seed)
    return topk_select(space, cfg, scorer, seed, k)


# ---------------------------------------------------------------------------
# final training


def final_train_eval(trees: Sequence[dsl.Mid], data: TaskData, test_domain: int, train_cfg: TrainConfig,
                     seed: int) -> dict:
    """Train on the non-test domains (9:1 train/val), evaluate the best-val model on the test domain.

    The split depends only on ``seed`` so runs with and without supervision
    are paired.
    """
    names = data.domain_names
    test = names[test_domain]
    pool = [s for n in names if n != test for s in data.domains[n]]
    perm = np.random.default_rng([seed, 7]).permutation(len(pool))
    n_val = max(1, len(pool) // 10)
    val = [pool[i] for i in perm[:n_val]]
    tr = [pool[i] for i in perm[n_val:]]
    model, targets, stds = build_model(data, tr, list(trees), train_cfg, seed)
    report = train(model, tr, targets, train_cfg, seed, data.n_classes, val, track_train=False, keep_best=True)
    test_shapes = data.domains[test]
    return {
        "trees": [dsl.print_tree(t) for t in trees],
        "seed": seed,
        "test_domain": test,
        "best_epoch": report.best_epoch,
        "in_dist": report.val_miou[report.best_epoch],
        "out_of_dist": miou(model, test_shapes, data.n_classes),
        "per_class_iou": per_class_iou(model, test_shapes, data.n_classes),
        "losses": report.losses,
        "val_miou": report.val_miou,
        "target_mean": [s.mean.tolist() for s in stds],
        "target_std": [s.std.tolist() for s in stds],
    }


def run_pipeline(data: TaskData, gcfg: GrammarConfig, cfg: SearchConfig, train_cfg: TrainConfig, seed: int,
                 out_dir: str | os.PathLike | None = None, executor=None) -> dict:
    """Search, select, then final-train with the selection and without supervision (paired)."""
    reward = cross_val_reward(data, cfg, train_cfg, seed, executor)
    state = run_search(cfg, gcfg, reward, seed, out_dir)
    scorer = cross_val_scorer(data, cfg, train_cfg, seed, executor)
    result = select(state.space, cfg, scorer, seed)
    final_cfg = replace(train_cfg, epochs=cfg.final_epochs)
    sup = final_train_eval(result.selected.trees, data, cfg.test_domain, final_cfg, seed)
    base = final_train_eval((), data, cfg.test_domain, final_cfg, seed)
    out = {
        "seed": seed,
        "selected": result.selected.texts,
        "selection_score": result.selected.score,
        "supervised": sup,
        "baseline": base,
        "delta_ood": sup["out_of_dist"] - base["out_of_dist"],
    }
    if out_dir is not None:
        Path(out_dir, "selection.json").write_text(result.to_json() + "\n")
        Path(out_dir, "pipeline.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out

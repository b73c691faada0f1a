"""Command-line entry point: partsup <subcommand> [options]."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import dsl, features, grammar, search, synthgen
from .config import ConfigError, RunConfig, help_text, load_config
from .evaluator import EvaluatorError, TaskData

log = logging.getLogger("partsup")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class Failure(Exception):
    """Validation failure: exit status 1."""


# ---------------------------------------------------------------------------
# helpers


def resolve_threads(flag: int | None, cfg: RunConfig) -> int:
    if flag is not None:
        n = flag
    elif os.environ.get("AGP_THREADS"):
        try:
            n = int(os.environ["AGP_THREADS"])
        except ValueError:
            raise ConfigError("AGP_THREADS", f"not an integer: {os.environ['AGP_THREADS']!r}")
    else:
        n = cfg["threads"]
    if n < 1:
        raise ConfigError("--threads", "must be >= 1")
    return n


@contextmanager
def executor_for(threads: int):
    if threads <= 1:
        yield None
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            yield ex


def make_run_dir(cfg: RunConfig, explicit: str | None) -> Path:
    if explicit:
        path = Path(explicit)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path(cfg["paths.out"]) / f"{cfg.task}_{cfg.seed}_{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.resolved").write_text(cfg.to_json() + "\n")
    return path


def load_dataset(cfg: RunConfig, path: str | None) -> synthgen.PartDataset:
    path = path or cfg["paths.data"]
    if path:
        ds = synthgen.read_dataset(path)
        if ds.task != cfg.task:
            raise ConfigError("task", f"dataset {path} holds task {ds.task!r}, config says {cfg.task!r}")
        return ds
    gen = synthgen.gen_primitive_dataset if cfg.task == "primitive" else synthgen.gen_mobility_dataset
    return gen(cfg.domain_specs(), cfg.seed)


def task_data(cfg: RunConfig, ds: synthgen.PartDataset) -> TaskData:
    return TaskData(ds, radius=cfg["grammar.radius"], n_samples=cfg["grammar.n_samples"], knn=cfg["evaluator.knn"],
                    seed=cfg.seed, base_only=cfg["grammar.operants"] == "base")


def _parse_trees(texts: list[str]) -> list[dsl.Mid]:
    out = []
    for t in texts:
        try:
            out.append(dsl.parse_tree(t))
        except dsl.ParseError as exc:
            raise ConfigError("--tree", str(exc))
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _log_header(run_dir: Path, cfg: RunConfig, extra: dict) -> None:
    info = {"config_digest": cfg.digest(), "grammar_digest": cfg.grammar_config().digest(), **extra}
    _write_json(run_dir / "run_info.json", info)
    with open(run_dir / "search.log", "a") as fh:
        fh.write(f"config_digest {info['config_digest']} grammar_digest {info['grammar_digest']}\n")
    log.info("config digest %s", info["config_digest"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args, cfg: RunConfig) -> int:
    gen = synthgen.gen_primitive_dataset if cfg.task == "primitive" else synthgen.gen_mobility_dataset
    ds = gen(cfg.domain_specs(), cfg.seed)
    out = args.out or "dataset.agpd"
    synthgen.write_dataset(ds, out)
    hist = {name: synthgen.type_histogram(shapes).round(3).tolist() for name, shapes in ds.domains.items()} \
        if ds.task == "primitive" else {name: len(shapes) for name, shapes in ds.domains.items()}
    print(json.dumps({"out": out, "task": ds.task, "domains": hist}))
    return EXIT_OK


def cmd_search(args, cfg: RunConfig) -> int:
    scfg, gcfg, tcfg = cfg.search_config(), cfg.grammar_config(), cfg.train_config()
    data = task_data(cfg, load_dataset(cfg, args.data))
    run_dir = Path(args.resume) if args.resume else make_run_dir(cfg, args.run_dir)
    if args.resume:
        resolved = run_dir / "config.resolved"
        if resolved.exists() and json.loads(resolved.read_text()) != cfg.data:
            raise ConfigError("--resume", "config differs from the one recorded in the run directory")
    else:
        _log_header(run_dir, cfg, {"command": "search"})
    with executor_for(args.threads_resolved) as ex:
        reward = search.cross_val_reward(data, scfg, tcfg, cfg.seed, ex)
        state = search.run_search(scfg, gcfg, reward, cfg.seed, run_dir, resume=bool(args.resume))
    (run_dir / "space_final").write_bytes(grammar.save_space(state.space, state.reinforce.baseline))
    done = search.sample_events(state.events)
    print(json.dumps({"run_dir": str(run_dir), "epochs": state.epoch, "samples": len(done),
                      "skipped": len(state.events) - len(done)}))
    return EXIT_OK


def _space_from(path: str, cfg: RunConfig) -> grammar.DistributionSpace:
    p = Path(path)
    if p.is_dir():
        p = p / "space_final"
    try:
        return grammar.load_space(p.read_bytes(), cfg.grammar_config())
    except OSError as exc:
        raise ConfigError("--space", str(exc))


def cmd_select(args, cfg: RunConfig) -> int:
    scfg, tcfg = cfg.search_config(), cfg.train_config()
    space = _space_from(args.space, cfg) if args.space else grammar.new_space(cfg.grammar_config())
    data = task_data(cfg, load_dataset(cfg, args.data))
    run_dir = make_run_dir(cfg, args.run_dir)
    _log_header(run_dir, cfg, {"command": "select", "strategy": scfg.strategy})
    with executor_for(args.threads_resolved) as ex:
        scorer = search.cross_val_scorer(data, scfg, tcfg, cfg.seed, ex)
        result = search.select(space, scfg, scorer, cfg.seed)
    (run_dir / "selection.json").write_text(result.to_json() + "\n")
    print(json.dumps({"run_dir": str(run_dir), "trees": result.selected.texts, "score": result.selected.score}))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    texts = list(args.tree or [])
    if args.selection:
        sel_path = Path(args.selection)
        if sel_path.is_dir():
            sel_path = sel_path / "selection.json"
        try:
            texts += json.loads(sel_path.read_text())["trees"]
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError("--selection", str(exc))
    trees = _parse_trees(texts)
    if len(trees) > 3:
        raise ConfigError("--tree", "at most 3 supervision trees")
    data = task_data(cfg, load_dataset(cfg, args.data))
    run_dir = make_run_dir(cfg, args.run_dir)
    _log_header(run_dir, cfg, {"command": "train", "trees": texts})
    report = search.final_train_eval(trees, data, cfg["search.test_domain"], cfg.train_config(), cfg.seed)
    _write_json(run_dir / "report.json", report)
    print(json.dumps({k: report[k] for k in ("trees", "seed", "in_dist", "out_of_dist", "best_epoch")}))
    return EXIT_OK


def cmd_eval_tree(args, cfg: RunConfig) -> int:
    (tree,) = _parse_trees([args.tree])
    data = task_data(cfg, load_dataset(cfg, args.data))
    shape = data.domains[data.domain_names[args.domain]][args.shape]
    try:
        values = data.targets(tree, shape)
    except EvaluatorError as exc:
        raise Failure(str(exc))
    if args.out:
        np.save(args.out, values)
    else:
        np.savetxt(sys.stdout, values, fmt="%.10g")
    return EXIT_OK


def cmd_oracle_check(args, cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    rows = features.oracle_check(cfg.seed, args.trials)
    print(features.format_table(rows, time.perf_counter() - t0))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_FAIL


def cmd_enumerate(args, cfg: RunConfig) -> int:
    gcfg = grammar.GrammarConfig.mini() if args.mini else cfg.grammar_config()
    space = _space_from(args.space, cfg) if args.space else grammar.new_space(gcfg)
    for tree, p in grammar.enumerate_trees(space):
        print(f"{p:.17g}\t{dsl.print_tree(tree)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--threads", type=int, help="worker threads (falls back to AGP_THREADS)")
    common.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    common.add_argument("--task", choices=synthgen.TASKS, help="shortcut for --set task=NAME")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="partsup", description="Automatic intermediate-supervision search.",
                                     epilog=help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, fn):
        p = sub.add_parser(name, parents=[common], help=help_, epilog=help_text(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(fn=fn)
        return p

    p = add("gen", "generate a synthetic dataset file", cmd_gen)
    p.add_argument("--out", help="output dataset path (default dataset.agpd)")

    for name, help_, fn in (("search", "run the supervision search", cmd_search),
                            ("select", "select 1-3 supervisions from a searched space", cmd_select),
                            ("train", "final training with chosen supervisions", cmd_train)):
        p = add(name, help_, fn)
        p.add_argument("--data", help="dataset file (overrides paths.data)")
        p.add_argument("--run-dir", help="explicit run directory")
        if name == "search":
            p.add_argument("--resume", metavar="RUN_DIR", help="continue an interrupted search")
        if name == "select":
            p.add_argument("--space", help="space checkpoint or search run directory (default: uniform space)")
        if name == "train":
            p.add_argument("--tree", action="append", help="supervision tree text (repeatable)")
            p.add_argument("--selection", help="selection.json or select run directory")

    p = add("eval-tree", "evaluate one tree and dump per-point features", cmd_eval_tree)
    p.add_argument("--tree", required=True)
    p.add_argument("--data", help="dataset file")
    p.add_argument("--domain", type=int, default=0)
    p.add_argument("--shape", type=int, default=0)
    p.add_argument("--out", help="write a .npy file instead of text to stdout")

    p = add("oracle-check", "check DSL feature trees against direct formulas", cmd_oracle_check)
    p.add_argument("--trials", type=int, default=5)

    p = add("enumerate", "list every tree of a small grammar with its probability", cmd_enumerate)
    p.add_argument("--mini", action="store_true", help="use the built-in mini grammar")
    p.add_argument("--space", help="space checkpoint to enumerate instead of the uniform space")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.task is not None:
            overrides.append(f'task="{args.task}"')
        cfg = load_config(args.config, overrides)
        args.threads_resolved = resolve_threads(args.threads, cfg)
        return args.fn(args, cfg)
    except grammar.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (Failure, synthgen.FormatError, grammar.GrammarError, dsl.DSLError, EvaluatorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

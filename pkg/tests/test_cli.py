import hashlib
import json
import re

import numpy as np
import pytest

from partsup import cli, config, grammar, synthgen
from partsup.config import ConfigError, parse_config

SMALL = ["--set", "synthgen.shapes_count=3", "--set", "synthgen.points_per_shape=64"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("d") / "d.agpd"
    assert cli.main(["gen", "--seed", "7", "--out", str(path)] + SMALL) == 0
    return path


def test_defaults():
    cfg = parse_config(None)
    assert cfg["search.epochs"] == 30
    assert cfg["search.samples_per_epoch"] == 4
    assert cfg["grammar.radius"] == 0.5
    assert cfg["selection.pool_size"] == 8
    assert cfg["evaluator.lambda_sup"] == 1.0
    assert parse_config("{}").data == parse_config("").data


def test_negative_epochs():
    with pytest.raises(ConfigError) as info:
        parse_config('{"search": {"epochs": -1}}')
    assert info.value.key == "search.epochs"


def test_unknown_section_suggestion():
    with pytest.raises(ConfigError) as info:
        parse_config('{"serach": {"epochs": 3}}')
    assert "search.epochs" in str(info.value)
    with pytest.raises(ConfigError, match="did you mean"):
        parse_config('{"search": {"epoch": 3}}')


def test_type_errors():
    with pytest.raises(ConfigError, match="integer"):
        parse_config('{"seed": "x"}')
    with pytest.raises(ConfigError, match="boolean"):
        parse_config('{"search": {"single_split": 1}}')
    with pytest.raises(ConfigError) as info:
        parse_config('{"grammar": {"unary": ["bogus"]}}')
    assert info.value.key == "grammar"
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config("{")


def test_overrides_after_file():
    cfg = parse_config('{"search": {"epochs": 5}}', ["search.epochs=7", "selection.strategy=topk:2"])
    assert cfg["search.epochs"] == 7 and cfg["selection.strategy"] == "topk:2"
    assert cfg.search_config().strategy == "topk:2"


def test_help_lists_every_key_with_default(capsys):
    with pytest.raises(SystemExit):
        cli.main(["search", "--help"])
    out = capsys.readouterr().out
    flat = {}
    for key in config.all_keys():
        flat[key] = parse_config(None)[key]
    listed = dict(re.findall(r"^  (\S+) = (.+?)  ", out, flags=re.M))
    assert set(listed) == set(flat)
    for key, value in flat.items():
        assert json.loads(listed[key]) == value


def test_module_configs_from_run_config():
    cfg = parse_config(None, ['task="mobility"', "grammar.operants=base", "grammar.max_height=2"])
    g = cfg.grammar_config()
    assert g.operants == ("P", "F") and g.max_height == 2
    assert cfg.train_config().lambda_sup == 1.0


def test_gen_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.agpd", tmp_path / "b.agpd"
    for p in (a, b):
        assert cli.main(["gen", "--task", "primitive", "--seed", "7", "--out", str(p)] + SMALL) == 0
    assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()


def test_gen_mobility(tmp_path):
    p = tmp_path / "m.agpd"
    assert cli.main(["gen", "--task", "mobility", "--out", str(p)] + SMALL) == 0
    assert synthgen.read_dataset(p).task == "mobility"


def test_eval_tree_unit_vectors(data_file, tmp_path, capsys):
    code, out, _ = run(capsys, "eval-tree", "--tree", "identity(svd(centralize(N)))", "--data", str(data_file),
                       "--domain", "2", "--seed", "7")
    assert code == 0
    vals = np.loadtxt(out.splitlines())
    assert vals.shape == (64, 3)
    np.testing.assert_allclose(np.linalg.norm(vals, axis=1), 1.0, atol=1e-9)
    npy = tmp_path / "f.npy"
    assert cli.main(["eval-tree", "--tree", "identity(sum(identity(P)))", "--data", str(data_file),
                     "--out", str(npy)]) == 0
    assert np.load(npy).shape == (64, 3)


def test_eval_tree_bad_tree_is_usage_error(data_file, capsys):
    code, _, err = run(capsys, "eval-tree", "--tree", "identity(sum(P))", "--data", str(data_file))
    assert code == 2 and "offset" in err


def test_eval_tree_unknown_operant_fails(data_file, capsys):
    code, _, err = run(capsys, "eval-tree", "--tree", "identity(sum(identity(F)))", "--data", str(data_file))
    assert code == 1 and "F" in err


def test_corrupt_data_file(tmp_path, capsys):
    bad = tmp_path / "bad.agpd"
    bad.write_bytes(b"AGPD\x01\x00")
    code, _, err = run(capsys, "eval-tree", "--tree", "identity(sum(identity(P)))", "--data", str(bad))
    assert code == 1 and "offset" in err


def test_oracle_check(capsys):
    code, out, _ = run(capsys, "oracle-check")
    assert code == 0 and "6/6 formulas pass" in out


def test_enumerate_mini(capsys):
    code, out, _ = run(capsys, "enumerate", "--mini")
    rows = [line.split("\t") for line in out.splitlines()]
    assert code == 0 and len(rows) == 2640
    assert abs(sum(float(p) for p, _ in rows) - 1) < 1e-9


def test_enumerate_full_grammar_too_large(capsys):
    code, _, err = run(capsys, "enumerate")
    assert code == 1 and "exceed" in err


def test_config_error_exit_code(capsys):
    code, _, err = run(capsys, "oracle-check", "--set", "serach.epochs=3")
    assert code == 2 and "search.epochs" in err
    code, _, err = run(capsys, "oracle-check", "--set", "nokey")
    assert code == 2


def test_threads_resolution(monkeypatch):
    cfg = parse_config(None)
    monkeypatch.setenv("AGP_THREADS", "3")
    assert cli.resolve_threads(None, cfg) == 3
    assert cli.resolve_threads(2, cfg) == 2
    monkeypatch.setenv("AGP_THREADS", "x")
    with pytest.raises(ConfigError):
        cli.resolve_threads(None, cfg)
    monkeypatch.delenv("AGP_THREADS")
    assert cli.resolve_threads(None, cfg) == 1


def test_pipeline_through_cli(data_file, tmp_path, capsys):
    before = data_file.read_bytes()
    common = ["--data", str(data_file), "--seed", "7", "--set", "search.epochs=2", "--set", "search.samples_per_epoch=2",
              "--set", "selection.pool_size=3", "--set", "selection.fold_epochs=1", "--set", "evaluator.final_epochs=2",
              "--set", "paths.out=" + str(tmp_path)]
    code, out, _ = run(capsys, "search", *common)
    assert code == 0
    run_dir = json.loads(out)["run_dir"]
    assert re.search(r"primitive_7_\d{8}-\d{6}$", run_dir)
    resolved = json.loads(open(f"{run_dir}/config.resolved").read())
    assert resolved["search"]["epochs"] == 2
    code, out, _ = run(capsys, "select", *common, "--space", run_dir, "--run-dir", str(tmp_path / "sel"))
    assert code == 0
    sel = json.loads((tmp_path / "sel" / "selection.json").read_text())
    assert 1 <= len(sel["trees"]) <= 3
    code, out, _ = run(capsys, "train", *common, "--selection", str(tmp_path / "sel"), "--run-dir",
                       str(tmp_path / "train"))
    assert code == 0
    report = json.loads((tmp_path / "train" / "report.json").read_text())
    assert {"in_dist", "out_of_dist", "per_class_iou", "seed"} <= set(report)
    assert data_file.read_bytes() == before


def test_search_resume_cli(data_file, tmp_path, capsys):
    common = ["--data", str(data_file), "--seed", "7", "--set", "search.samples_per_epoch=1"]
    assert cli.main(["search", *common, "--set", "search.epochs=2", "--run-dir", str(tmp_path / "a")]) == 0
    assert cli.main(["search", *common, "--set", "search.epochs=2", "--resume", str(tmp_path / "a")]) == 0
    # a different config cannot resume the run
    code, _, err = run(capsys, "search", *common, "--set", "search.epochs=3", "--resume", str(tmp_path / "a"))
    assert code == 2 and "config differs" in err


def test_task_mismatch(data_file, capsys):
    code, _, err = run(capsys, "train", "--data", str(data_file), "--task", "mobility")
    assert code == 2 and "task" in err


def test_space_checkpoint_wrong_grammar(data_file, tmp_path, capsys):
    path = tmp_path / "space"
    path.write_bytes(grammar.save_space(grammar.new_space(grammar.GrammarConfig.mini())))
    code, _, err = run(capsys, "select", "--data", str(data_file), "--space", str(path), "--run-dir", str(tmp_path / "s"))
    assert code == 1 and "digest" in err

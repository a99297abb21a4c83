import json
import subprocess
import sys

import pytest

from binsim.cli import RunConfig, main
from binsim.graph import GraphConfig, build_graph, graph_to_json
from binsim.tokenizer import tokenize_snippet

TINY_FLAGS = ["--token-emb-dim", "8", "--char-emb-dim", "4", "--char-filters", "8", "--hidden-dim", "8"]


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


@pytest.fixture
def mov_corpus(tmp_path):
    return write_jsonl(tmp_path / "c.jsonl", [
        {"id": "a", "arch": "arm", "instructions": ["MOV R0, R4"]},
        {"id": "b", "arch": "mips", "instructions": ["MOVE V0, A0"]},
    ])


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn")
    assert main(["gen-synthetic", "--out", str(out), "--num-functions", "60", "--n-neg", "5", "--seed", "1"]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(synthetic):
    ck = synthetic / "ck"
    code = main(["train", "--corpus", str(synthetic / "snippets.jsonl"),
                 "--train-pairs", str(synthetic / "pairs_train.jsonl"),
                 "--dev-pairs", str(synthetic / "pairs_dev.jsonl"),
                 "--checkpoint", str(ck), "--epochs", "8", "--seed", "3", *TINY_FLAGS])
    assert code == 0
    return ck


def test_help_and_bad_flags(capsys):
    assert main(["--help"]) == 0
    assert "build-vocab" in capsys.readouterr().out
    assert main(["train", "--help"]) == 0
    out = capsys.readouterr().out
    for flag in ("--epochs", "--disable-edges", "--aggregation", "--seed", "--config", "--workers"):
        assert flag in out
    assert main(["train", "--bogus"]) == 2
    assert main(["nope"]) == 2
    assert main([]) == 2


def test_console_script_module_entry():
    proc = subprocess.run([sys.executable, "-m", "binsim.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "binsim" in proc.stdout


def test_build_vocab(tmp_path, mov_corpus):
    out = tmp_path / "v.json"
    assert main(["build-vocab", "--corpus", str(mov_corpus), "--out", str(out)]) == 0
    first = out.read_bytes()
    assert json.loads(first)["tokens"]["MOV"] == 2
    assert main(["build-vocab", "--corpus", str(mov_corpus), "--out", str(out)]) == 0
    assert out.read_bytes() == first
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["build-vocab", "--corpus", str(empty), "--out", str(out)]) == 2


def test_malformed_corpus_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a", "arch": "arm", "instructions": ["nop"]}\n{oops\n')
    assert main(["build-vocab", "--corpus", str(bad), "--out", str(tmp_path / "v.json")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_build_graph(tmp_path, mov_corpus, capsys):
    assert main(["build-graph", "--corpus", str(mov_corpus), "--pair", "a,b"]) == 0
    dump = json.loads(capsys.readouterr().out)
    a = tokenize_snippet("a", "arm", ["MOV R0, R4"])
    b = tokenize_snippet("b", "mips", ["MOVE V0, A0"])
    assert dump == json.loads(json.dumps(graph_to_json(build_graph(a, b))))
    out = tmp_path / "g.json"
    assert main(["build-graph", "--corpus", str(mov_corpus), "--pair", "a,b", "--disable-edges", "e2,e3,e4,e5",
                 "--out", str(out)]) == 0
    assert {e["type"] for e in json.loads(out.read_text())["edges"]} == {"e0", "e1"}
    assert main(["build-graph", "--corpus", str(mov_corpus), "--pair", "a,zzz"]) == 2
    assert main(["build-graph", "--corpus", str(mov_corpus), "--pair", "a"]) == 2
    assert main(["build-graph", "--corpus", str(mov_corpus), "--pair", "a,b", "--disable-edges", "e7"]) == 2
    assert main(["build-graph", "--corpus", str(tmp_path / "missing.jsonl"), "--pair", "a,b"]) == 2


def test_config_file_and_flag_precedence(tmp_path, mov_corpus, capsys):
    rc = RunConfig(graph=GraphConfig(prefix_len=4), seed=9, paths={"corpus": str(mov_corpus)})
    cfg = tmp_path / "run.json"
    rc.save(cfg)
    assert RunConfig.load(cfg) == rc
    assert main(["build-graph", "--config", str(cfg), "--pair", "a,b"]) == 0
    dump = json.loads(capsys.readouterr().out)
    assert dump["config"]["n"] == 4 and not [e for e in dump["edges"] if e["type"] == "e2"]
    assert main(["build-graph", "--config", str(cfg), "--pair", "a,b", "--n", "3"]) == 0
    assert [e for e in json.loads(capsys.readouterr().out)["edges"] if e["type"] == "e2"]
    cfg.write_text(json.dumps({"graph": {}, "colour": "red"}))
    assert main(["build-graph", "--config", str(cfg), "--pair", "a,b", "--corpus", str(mov_corpus)]) == 2
    cfg.write_text(json.dumps({"model": {"hidden": 2}}))
    assert main(["build-graph", "--config", str(cfg), "--pair", "a,b", "--corpus", str(mov_corpus)]) == 2


def test_gen_synthetic_is_reproducible(tmp_path, monkeypatch):
    args = ["gen-synthetic", "--num-functions", "40", "--n-neg", "5"]
    monkeypatch.setenv("BINSIM_SEED", "4")
    assert main(args + ["--out", str(tmp_path / "x")]) == 0
    assert main(args + ["--out", str(tmp_path / "y"), "--seed", "4"]) == 0
    for f in ("snippets.jsonl", "pairs_train.jsonl", "search_all.jsonl", "splits.json", "spec.json"):
        assert (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()
    assert json.loads((tmp_path / "x" / "spec.json").read_text())["seed"] == 4
    assert main(["gen-synthetic", "--num-functions", "5", "--n-neg", "20", "--out", str(tmp_path / "z")]) == 2
    monkeypatch.setenv("BINSIM_SEED", "abc")
    assert main(args + ["--out", str(tmp_path / "w")]) == 2


def test_baseline_edit(synthetic, capsys):
    assert main(["baseline-edit", "--corpus", str(synthetic / "snippets.jsonl"),
                 "--pairs", str(synthetic / "pairs_train.jsonl")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert 0 <= out["auc"] <= 1 and out["n_pairs"] > 0


def test_train_eval_compare(synthetic, checkpoint, tmp_path, capsys):
    corpus = str(synthetic / "snippets.jsonl")
    log = json.loads((checkpoint / "train_log.json").read_text())
    assert log["seed"] == 3 and len(log["history"]) == 8
    assert main(["eval-auc", "--checkpoint", str(checkpoint), "--corpus", corpus,
                 "--pairs", str(synthetic / "pairs_test.jsonl")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert {"auc", "p_at_1", "mrr", "n_pairs", "n_queries", "ranks", "timing"} <= set(report)
    assert report["timing"]["predict_ms_per_pair"] > 0 and report["timing"]["train_seconds_per_epoch"] > 0
    assert main(["eval-search", "--checkpoint", str(checkpoint), "--corpus", corpus,
                 "--queries", str(synthetic / "search_all.jsonl"), "--no-timing"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n_queries"] == 60 and report["mrr"] >= report["p_at_1"] and "timing" not in report
    assert main(["compare", "--checkpoint", str(checkpoint), "--corpus", corpus,
                 "--pair", "fn0003@x86,fn0003@x86"]) == 0
    assert json.loads(capsys.readouterr().out)["probability"] > 0.5
    assert main(["compare", "--checkpoint", str(checkpoint), "--corpus", corpus,
                 "--pair", "fn0003@x86,fn0003@mips", "--pair", "fn0003@x86,fn0004@mips"]) == 0
    assert len(json.loads(capsys.readouterr().out)) == 2


def test_eval_errors(synthetic, checkpoint, tmp_path):
    corpus = str(synthetic / "snippets.jsonl")
    pairs = str(synthetic / "pairs_test.jsonl")
    assert main(["eval-auc", "--checkpoint", str(tmp_path / "none"), "--corpus", corpus, "--pairs", pairs]) == 2
    assert main(["eval-auc", "--corpus", corpus, "--pairs", pairs]) == 2
    other_vocab = tmp_path / "v.json"
    write_jsonl(tmp_path / "o.jsonl", [{"id": "q", "arch": "arm", "instructions": ["nop"]}])
    assert main(["build-vocab", "--corpus", str(tmp_path / "o.jsonl"), "--out", str(other_vocab)]) == 0
    assert main(["eval-auc", "--checkpoint", str(checkpoint), "--vocab", str(other_vocab), "--corpus", corpus,
                 "--pairs", pairs]) == 2
    one_class = write_jsonl(tmp_path / "p.jsonl", [{"a": "fn0001@x86", "b": "fn0001@mips", "label": 1}])
    assert main(["eval-auc", "--checkpoint", str(checkpoint), "--corpus", corpus, "--pairs", str(one_class)]) == 2
    assert main(["compare", "--checkpoint", str(checkpoint), "--corpus", corpus, "--pair", "x,y"]) == 2


def test_training_is_reproducible_from_cli(synthetic, checkpoint, tmp_path):
    again = tmp_path / "ck2"
    assert main(["train", "--corpus", str(synthetic / "snippets.jsonl"),
                 "--train-pairs", str(synthetic / "pairs_train.jsonl"),
                 "--dev-pairs", str(synthetic / "pairs_dev.jsonl"),
                 "--checkpoint", str(again), "--epochs", "8", "--seed", "3", *TINY_FLAGS]) == 0
    first = json.loads((checkpoint / "train_log.json").read_text())["history"]
    second = json.loads((again / "train_log.json").read_text())["history"]
    assert [h["loss"] for h in first] == [h["loss"] for h in second]
    assert (checkpoint / "params.pt").read_bytes() == (again / "params.pt").read_bytes()

import json

import pytest

from ahnpl.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"data": {"n_train": 300, "n_benchmark": 60}, "train": {"epochs": 1, "batch_size": 32}}))
    assert main(["gen-data", "--config", str(cfg), "--seed", "3", "--out", str(d / "data")]) == 0
    return d


def test_gen_data_outputs_and_manifest(workdir):
    data = workdir / "data"
    assert len((data / "train.tsv").read_text().splitlines()) == 300
    assert len((data / "benchmark.tsv").read_text().splitlines()) == 60
    man = json.loads((data / "manifest.gen-data.json").read_text())
    assert man["seed"] == 3 and man["config"]["n_train"] == 300
    assert set(man) >= {"config_hash", "inputs", "outputs", "tool_version", "command"}


def test_gen_data_is_idempotent(workdir, tmp_path):
    cfg = str(workdir / "cfg.json")
    main(["gen-data", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "again")])
    a = json.loads((workdir / "data" / "manifest.gen-data.json").read_text())["outputs"]
    b = json.loads((tmp_path / "again" / "manifest.gen-data.json").read_text())["outputs"]
    assert sorted(a.values()) == sorted(b.values())


def test_gen_negatives_counts(workdir, capsys):
    data = workdir / "data"
    out = data / "neg.tsv"
    assert main(["gen-negatives", "--corpus", str(data / "train.tsv"), "--lexicon", str(data / "lexicon.tsv"), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "captions: 300" in text and "skipped: 0" in text
    first = out.read_text().splitlines()[0].split("\t")
    assert first[0] == "train00000" and first[2] in ("NOUN_SWAP", "SUBSTITUTION")


def _train(workdir, out, *extra):
    data = workdir / "data"
    args = ["train", "--config", str(workdir / "cfg.json"), "--corpus", str(data / "train.tsv"), "--lexicon", str(data / "lexicon.tsv")]
    args += ["--benchmark", str(data / "benchmark.tsv"), "--out", str(out), *extra]
    return main(args)


def test_train_eval_and_distance(workdir, tmp_path):
    assert _train(workdir, tmp_path / "t1") == 0
    assert _train(workdir, tmp_path / "t2") == 0
    assert (tmp_path / "t1" / "metrics.csv").read_bytes() == (tmp_path / "t2" / "metrics.csv").read_bytes()
    assert (tmp_path / "t1" / "report.json").read_bytes() == (tmp_path / "t2" / "report.json").read_bytes()
    ckpt = str(tmp_path / "t1" / "checkpoint.txt")
    bench = str(workdir / "data" / "benchmark.tsv")
    assert main(["eval", "--checkpoint", ckpt, "--benchmark", bench, "--items", "--out", str(tmp_path / "e1")]) == 0
    assert main(["eval", "--checkpoint", ckpt, "--benchmark", bench, "--out", str(tmp_path / "e2")]) == 0
    assert (tmp_path / "e1" / "eval.csv").read_bytes() == (tmp_path / "e2" / "eval.csv").read_bytes()
    assert len((tmp_path / "e1" / "items.tsv").read_text().splitlines()) == 61
    out = tmp_path / "dist.tsv"
    assert main(["distance-report", "--checkpoint", ckpt, "--examples", bench, "--limit", "5", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 6


def test_ablation_flags_and_fine_tuning(workdir, tmp_path):
    assert _train(workdir, tmp_path / "pre", "--preset", "desk-pretrain") == 0
    assert _train(workdir, tmp_path / "c", "--no-negatives", "--no-mhnl", "--no-dmcl", "--init", str(tmp_path / "pre" / "checkpoint.txt")) == 0
    man = json.loads((tmp_path / "c" / "manifest.train.json").read_text())
    assert (man["config"]["use_negatives"], man["config"]["use_mhnl"], man["config"]["use_dmcl"]) == (False, False, False)
    header = (tmp_path / "c" / "metrics.csv").read_text().splitlines()[0]
    assert header.endswith(",a")


def test_mscoco_preset_echoed_in_manifest(workdir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"preset": "paper-mscoco", "train": {"epochs": 1}}))
    data = workdir / "data"
    args = ["train", "--config", str(cfg), "--corpus", str(data / "train.tsv"), "--lexicon", str(data / "lexicon.tsv"), "--out", str(tmp_path / "p")]
    assert main(args) == 0
    man = json.loads((tmp_path / "p" / "manifest.train.json").read_text())["config"]
    assert (man["batch_size"], man["lr"], man["weight_decay"]) == (128, 2e-5, 0.1)


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for term in ("l_cont", "l_neg_visual", "l_neg_textual", "l_mar_pos", "l_mar_neg", "l_total"):
        assert term in out
    assert main(["gradcheck", "--corrupt", "1e-3"]) == 2


def test_validation_errors_exit_1(workdir, tmp_path):
    bench = str(workdir / "data" / "benchmark.tsv")
    assert main(["eval", "--checkpoint", str(tmp_path / "missing"), "--benchmark", bench, "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"bogus": 1}}))
    data = workdir / "data"
    assert main(["train", "--config", str(bad), "--corpus", str(data / "train.tsv"), "--lexicon", str(data / "lexicon.tsv"), "--out", str(tmp_path / "x")]) == 1

import json

import numpy as np
import pytest

from viser import experiment
from viser.cli import bench_config, build_parser, main
from viser.embedding import Corpus, load_corpus, read_jsonl, write_binary, write_jsonl
from viser.neighbor_search import SearchParams, exact_search, read_matches, search

BENCH = ["bench", "--seeds", "1", "--iterations", "120", "--quiet", "--km", "16", "--kr", "3"]
SMALL_SPEC = ["--n-unlabeled", "60", "--n-test", "40"]


def corpora(tmp_path, n_lab=40, n_unl=500, dim=12, seed=0):
    rng = np.random.default_rng(seed)
    lab = Corpus(np.arange(n_lab), rng.normal(size=(n_lab, dim)))
    unl = Corpus(np.arange(1000, 1000 + n_unl), rng.normal(size=(n_unl, dim)))
    write_jsonl(lab, tmp_path / "lab.jsonl")
    write_binary(unl, tmp_path / "unl.bin")
    return tmp_path / "lab.jsonl", tmp_path / "unl.bin"


def test_search_matches_library(tmp_path):
    lab, unl = corpora(tmp_path)
    out = tmp_path / "m.jsonl"
    assert main(["search", "--labeled", str(lab), "--unlabeled", str(unl), "--km", "5", "--kr", "4",
                 "--shards", "3", "--out", str(out)]) == 0
    want = search(load_corpus(lab), load_corpus(unl), SearchParams(5, 4, 3))
    assert read_matches(out) == want


def test_search_oracle_flag(tmp_path):
    lab, unl = corpora(tmp_path, n_lab=20, n_unl=300)
    out = tmp_path / "m.csv"
    assert main(["search", "--labeled", str(lab), "--unlabeled", str(unl), "--oracle", "--kr", "3",
                 "--out", str(out)]) == 0
    assert read_matches(out) == exact_search(load_corpus(lab), load_corpus(unl), 3)


def test_search_verify_identity(tmp_path, capsys):
    lab, _ = corpora(tmp_path)
    assert main(["search", "--labeled", str(lab), "--unlabeled", str(lab), "--kr", "1", "--verify"]) == 0
    assert "agreement: 100%" in capsys.readouterr().out


def test_search_reports_truncated_record(tmp_path, capsys):
    lab, unl = corpora(tmp_path, n_unl=10)
    raw = unl.read_bytes()
    rec = 8 + 4 * 12
    unl.write_bytes(raw[: 20 + 7 * rec + 3])
    assert main(["search", "--labeled", str(lab), "--unlabeled", str(unl)]) != 0
    err = capsys.readouterr().err
    assert "record 7" in err and f"byte offset {20 + 7 * rec}" in err


def test_search_dimension_mismatch(tmp_path, capsys):
    lab, _ = corpora(tmp_path)
    other = tmp_path / "o.jsonl"
    write_jsonl(Corpus([0], [[1.0, 2.0]]), other)
    assert main(["search", "--labeled", str(lab), "--unlabeled", str(other)]) != 0
    assert "dimension" in capsys.readouterr().err


def test_gen_exports_corpora(tmp_path):
    assert main(["gen", "--seed", "2", "--out-dir", str(tmp_path)] + SMALL_SPEC) == 0
    train = read_jsonl(tmp_path / "train.jsonl")
    unl = read_jsonl(tmp_path / "unlabeled.jsonl")
    assert len(train) == 16 and len(unl) == 60
    assert unl.labels is None
    assert all(lab in ((0,), (1,)) for lab in train.labels)
    first = json.loads((tmp_path / "unlabeled.jsonl").read_text().splitlines()[0])
    assert "labels" not in first


def test_contour_csv(tmp_path):
    out = tmp_path / "c.csv"
    assert main(["contour", "--seed", "0", "--resolution", "9", "--out", str(out)] + SMALL_SPEC) == 0
    grid = np.loadtxt(out, delimiter=",")
    assert grid.shape == (9, 9)
    assert np.all((grid > 0) & (grid < 1))


def test_eval_report(tmp_path):
    preds = tmp_path / "p.jsonl"
    preds.write_text(
        json.dumps({"scores": [0.9, 0.2], "truth": [1, 0], "points": {"0": [5, 5]}, "boxes": {"0": [[0, 0, 4, 4]]}})
        + "\n" + json.dumps({"scores": [0.1, 0.7], "truth": [1, 1]}) + "\n"
    )
    out = tmp_path / "r.json"
    assert main(["eval", "--predictions", str(preds), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["error_percent"] == 25.0
    assert rep["localization_accuracy"] == 1.0
    assert rep["per_class_ap"] == [1.0, 1.0]


def test_eval_rejects_bad_lines(tmp_path, capsys):
    preds = tmp_path / "p.jsonl"
    preds.write_text('{"scores": [0.1]}\n')
    assert main(["eval", "--predictions", str(preds)]) != 0
    assert "line 1" in capsys.readouterr().err


def test_bench_writes_record_and_refuses_overwrite(tmp_path, capsys):
    args = BENCH + ["--reg", "none", "at", "--out-dir", str(tmp_path)]
    assert main(args) == 0
    records = list(tmp_path.glob("run-*.json"))
    assert len(records) == 1
    rec = json.loads(records[0].read_text())
    assert set(rec["aggregate"]) == {"cross_entropy", "at"}
    assert main(args) != 0
    assert "exists" in capsys.readouterr().err
    assert main(args + ["--force"]) == 0


def test_bench_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('methods = ["vat"]\nseeds = [4, 5]\n[vat]\nepsilon = 0.25\npower_iters = 2\n')
    parsed = bench_config(build_parser().parse_args(["bench", "--config", str(cfg), "--xi", "1e-5"]))
    assert parsed.methods == ("vat",) and parsed.seeds == (4, 5)
    assert (parsed.vat.epsilon, parsed.vat.power_iters, parsed.vat.xi) == (0.25, 2, 1e-5)
    parsed = bench_config(build_parser().parse_args(["bench", "--config", str(cfg), "--eps", "0.5", "--seeds", "3"]))
    assert parsed.vat.epsilon == 0.5 and parsed.seeds == (0, 1, 2)
    jcfg = tmp_path / "c.json"
    jcfg.write_text(json.dumps({"viser": {"take": 3}, "train": {"learning_rate": 0.05}}))
    parsed = bench_config(build_parser().parse_args(["bench", "--config", str(jcfg), "--restart"]))
    assert parsed.viser.take == 3 and parsed.viser.restart and parsed.train.learning_rate == 0.05


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("VISER_THREADS", "3")
    assert experiment.thread_cap() == 3
    monkeypatch.setenv("VISER_THREADS", "junk")
    assert experiment.thread_cap() == 1


@pytest.mark.parametrize("command", [
    ["gen", "--seed", "1", "--out-dir", "{dir}"] + SMALL_SPEC,
    ["contour", "--seed", "1", "--resolution", "5", "--out", "{dir}/c.csv"] + SMALL_SPEC,
    ["search", "--labeled", "{lab}", "--unlabeled", "{unl}", "--km", "3", "--shards", "2", "--out", "{dir}/m.csv"],
])
def test_commands_are_byte_deterministic(tmp_path, command):
    lab, unl = corpora(tmp_path)
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        args = [a.format(dir=d, lab=lab, unl=unl) for a in command]
        assert main(args) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outputs[0] == outputs[1]

import json

import pytest

from roadloc.cli import build_parser, main


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["eval", "sweep", "--bogus"])
    assert e.value.code == 2


def test_bad_experiment_exits_2():
    with pytest.raises(SystemExit) as e:
        main(["eval", "everything"])
    assert e.value.code == 2


def test_train_without_generate(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "world.json" in err and "roadloc generate" in err


def test_eval_without_model(tmp_path, capsys):
    from conftest import SMALL_PIPELINE

    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL_PIPELINE))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert main(["eval", "e2e", "--out", str(tmp_path)]) == 1
    assert "roadloc train --triplets all" in capsys.readouterr().err


def test_seed_mismatch_is_usage_error(pipeline_runs, capsys):
    out = pipeline_runs[0]
    assert main(["eval", "sweep", "--seed", "2", "--out", str(out)]) == 2


def test_bad_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"world": {"nope": 1}}))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "unknown keys" in capsys.readouterr().err


def test_parser_lists_commands():
    text = build_parser().format_help()
    for cmd in ("generate", "train", "index", "localize", "fuse", "eval"):
        assert cmd in text


def test_every_command_writes_manifest(pipeline_runs):
    out = pipeline_runs[0]
    names = sorted(p.name for p in out.glob("manifest-*.json"))
    assert names == sorted([
        "manifest-generate.json", "manifest-train-regular.json", "manifest-train-all.json",
        "manifest-index-all.json", "manifest-localize-all.json", "manifest-fuse.json",
        "manifest-eval-retrieval.json", "manifest-eval-sweep.json", "manifest-eval-e2e.json",
    ])
    doc = json.loads((out / "manifest-eval-e2e.json").read_text())
    assert doc["seed"] == 1 and len(doc["config_sha256"]) == 64
    for name, digest in doc["outputs"].items():
        assert (out / name).exists() and len(digest) == 64


def test_pipeline_outputs_identical(pipeline_runs):
    a, b = pipeline_runs
    files = sorted(p.name for p in a.iterdir() if p.suffix in (".csv", ".json"))
    assert any(f.startswith("e2e") for f in files) and "sweep.csv" in files and "retrieval_summary.csv" in files
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_e2e_traces_have_four_series(pipeline_runs):
    import csv
    from collections import defaultdict

    times = defaultdict(list)
    with open(pipeline_runs[0] / "e2e_traces.csv") as fh:
        for row in csv.DictReader(fh):
            times[row["ride_id"], row["series"]].append(row["t"])
    rides = {r for r, _ in times}
    assert len(rides) == 3
    for r in rides:
        series = {s: times[r, s] for rr, s in times if rr == r}
        assert set(series) == {"gt", "raw", "coarse", "fused"}
        assert all(t == series["gt"] for t in series.values())

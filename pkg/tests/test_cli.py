import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from ddm import cli, nets
from ddm.trainer import Trajectory

ROOT = Path(__file__).resolve().parents[1]
MICRO = ROOT / "configs" / "blobs_micro.json"
VERBS = ["cluster", "train", "distill", "evaluate", "oracle", "diagnose", "report"]
# wall-clock measurements are the only artifacts allowed to differ between runs
TIMING_FILES = {"evaluate/timing.json", "oracle/timing.json", "report/timing.csv",
                "report/summary.txt"}


def run(*args):
    return cli.main([str(a) for a in args])


def pipeline(out, config=MICRO):
    for verb in VERBS:
        assert run(verb, "--config", config, "--out", out) == 0, verb


def rows(path):
    with open(path) as f:
        return list(csv.reader(line for line in f if not line.startswith("#")))


@pytest.fixture(scope="module")
def micro(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro")
    pipeline(out)
    return out


def test_pipeline_writes_every_stage(micro):
    for verb in VERBS[:-1]:
        stamp = json.loads((micro / verb / "stamp.json").read_text())
        assert stamp["seed"] == 0 and stamp["stage"] == verb and stamp["config_hash"]
    assert rows(micro / "cluster" / "assignment.csv")[0] == ["index", "class", "cluster"]
    assert (micro / "report" / "summary.txt").read_text()


def test_attribution_csv_has_k_rows(micro):
    (scores,) = sorted((micro / "evaluate" / "scores").glob("*.csv"))[:1]
    table = rows(scores)
    assert table[0] == ["cluster_id", "class", "score_dist1", "score_dist2", "score_dist3"]
    assert len(table) - 1 == 4


def test_artifacts_embed_config_hash_and_seed(micro):
    for p in ["cluster/assignment.csv", "evaluate/located.csv", "oracle/dists.csv",
              "diagnose/sweep.csv"]:
        head = [l for l in (micro / p).read_text().splitlines() if l.startswith("#")]
        assert any(l.startswith("# config_hash:") for l in head), p
        assert any(l.startswith("# seed: 0") for l in head), p


def test_rerun_is_a_cache_hit(micro, capsys):
    before = (micro / "distill" / "synset_cluster.syn").stat().st_mtime_ns
    assert run("distill", "--config", MICRO, "--out", micro) == 0
    assert "cached" in capsys.readouterr().out
    assert (micro / "distill" / "synset_cluster.syn").stat().st_mtime_ns == before


def test_runs_are_byte_identical(micro, tmp_path):
    pipeline(tmp_path / "b")
    files = sorted(p.relative_to(micro) for p in micro.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*")
                           if p.is_file())
    for rel in files:
        if rel.as_posix() in TIMING_FILES:
            continue
        assert (micro / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_report_regeneration_is_byte_identical(micro):
    before = {p.name: p.read_bytes() for p in (micro / "report").iterdir()}
    assert run("report", "--out", micro) == 0
    assert before == {p.name: p.read_bytes() for p in (micro / "report").iterdir()}


def test_changed_config_is_refused_without_force(micro, tmp_path):
    cfg = json.loads(MICRO.read_text())
    cfg["cluster"]["C"] = 1
    path = tmp_path / "c1.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "run"
    shutil.copytree(micro, out)
    assert run("cluster", "--config", path, "--out", out) == 2
    assert run("cluster", "--config", path, "--out", out, "--force") == 0
    # the old trajectory is still valid, but distill is now stale
    assert run("evaluate", "--config", path, "--out", out) == 3


def test_c1_echoes_class_partition(tmp_path):
    cfg = json.loads(MICRO.read_text())
    cfg["cluster"]["C"] = 1
    path = tmp_path / "c1.json"
    path.write_text(json.dumps(cfg))
    assert run("cluster", "--config", path, "--out", tmp_path / "o") == 0
    table = rows(tmp_path / "o" / "cluster" / "assignment.csv")[1:]
    assert all(r[1] == r[2] for r in table)


def test_exit_codes(tmp_path, capsys):
    assert run("evaluate", "--config", MICRO, "--out", tmp_path / "empty") == 3
    assert "distill" in capsys.readouterr().err
    assert run("report", "--out", tmp_path / "nothing") == 3
    assert run("cluster", "--config", tmp_path / "missing.json", "--out", tmp_path) == 2
    assert "missing.json" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"version": 1, "colour": "blue"}))
    assert run("cluster", "--config", bad, "--out", tmp_path / "x") == 2
    bad.write_text(json.dumps({"version": 99}))
    assert run("cluster", "--config", bad, "--out", tmp_path / "x") == 2
    idx = tmp_path / "idx.json"
    idx.write_text(json.dumps({"dataset": {"kind": "idx", "train_images": str(tmp_path / "nope"),
                                           "train_labels": str(tmp_path / "nope2"),
                                           "test_images": str(tmp_path / "nope"),
                                           "test_labels": str(tmp_path / "nope2")}}))
    assert run("cluster", "--config", idx, "--out", tmp_path / "y") == 2
    assert "nope" in capsys.readouterr().err


def test_divergent_training_exits_numeric(tmp_path):
    cfg = json.loads(MICRO.read_text())
    cfg["train"]["lr"] = 1e200
    path = tmp_path / "huge.json"
    path.write_text(json.dumps(cfg))
    with np.errstate(all="ignore"):
        assert run("train", "--config", path, "--out", tmp_path / "o") == 4


@pytest.mark.xfail(strict=True, reason="reverse-matched synsets do not reproduce the exact "
                   "per-sample influence ranking at micro scale; see the decision log")
def test_located_cluster_matches_brute_force_oracle(micro):
    """The exact retrain of every cluster is available (fidelity covers all K=4)."""
    cfg = cli.load_config(MICRO)
    train, test = cli.load_data(cfg)
    spec = cli.model_spec(cfg, train)
    theta = Trajectory.load(micro / "train" / "trajectory").final
    oracles = [nets.load_params(micro / "oracle" / f"cluster_{k}.ckpt", spec) for k in range(4)]
    hits = total = 0
    for r in rows(micro / "evaluate" / "located.csv")[1:]:
        if r[2] != "dist1":
            continue
        x = test.images[int(r[0]):int(r[0]) + 1]
        base = nets.predict(spec, theta, x)[0]
        shift = [((nets.predict(spec, o, x)[0] - base) ** 2).sum() for o in oracles]
        hits += int(np.argmax(shift)) == int(r[5])
        total += 1
    assert hits > total / 2

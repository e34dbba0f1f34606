import csv
import json
import time

import numpy as np
import pytest

from mindcraft import querygen as Q
from mindcraft.cli import main, top2_projection
from mindcraft.config import RunConfig, load_run_config

import suites


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return suites.cli_pipeline(tmp_path_factory.mktemp("pipe"), steps=6, episodes=12)


def test_gen_data_zero_episodes(tmp_path):
    assert run("gen-scenes", "--n", 2, "--out", tmp_path / "s") == 0
    assert run("gen-data", "--scenes", tmp_path / "s", "--episodes", 0, "--out", tmp_path / "d.jsonl") == 0
    assert (tmp_path / "d.jsonl").read_text() == ""
    assert Q.read_jsonl(tmp_path / "d.jsonl") == []


def test_missing_scene_dir(tmp_path, capsys):
    code = run("gen-data", "--scenes", tmp_path / "nope", "--episodes", 3, "--out", tmp_path / "d.jsonl")
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err == ["error: scenes: not found"]


def test_usage_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["gen-data"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["ablate", "--preset", "nonsense", "--train", "a", "--test", "b", "--scenes", "c", "--out", "d"])
    assert e.value.code == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"bogus": 1}}))
    assert run("gen-scenes", "--n", 1, "--out", tmp_path / "s", "--config", bad) == 2


def test_gen_scenes_seed_range(tmp_path):
    assert run("gen-scenes", "--seeds", "3..5", "--out", tmp_path / "s") == 0
    assert sorted(p.name for p in (tmp_path / "s").iterdir()) == [f"scene_{i:06d}.json" for i in (3, 4, 5)]


def test_pipeline_outputs(pipeline):
    rep = json.loads(pipeline["report"].read_text())
    for k in ("qa_acc", "gca", "cmc", "sr_wa", "sr", "spl", "os", "n_queries", "n_probe_sets", "per_qtype"):
        assert k in rep
    log = [json.loads(l) for l in pipeline["log"].read_text().splitlines()]
    assert [r["step"] for r in log] == list(range(6))
    preds = pipeline["preds"].read_text().splitlines()
    assert len(preds) == 12


def test_resume_appends_to_log(pipeline, tmp_path):
    c = ["--config", pipeline["run"] / "config.json", "--seed", 0]
    out = tmp_path / "r"
    assert run("train", "--data", pipeline["data"], "--out", out, "--steps", 3, *c) == 0
    assert run("train", "--data", pipeline["data"], "--out", out, "--steps", 6,
               "--resume", out / "state.ckpt", *c) == 0
    assert (out / "train_log.jsonl").read_text() == pipeline["log"].read_text()


def test_config_round_trip(pipeline, tmp_path):
    written = pipeline["run"] / "config.json"
    cfg = load_run_config(written)
    assert cfg.to_dict() == json.loads(written.read_text())
    again = suites.cli_pipeline(tmp_path, config=cfg.to_dict(), steps=6, episodes=12)
    assert again["report"].read_bytes() == pipeline["report"].read_bytes()


def test_presets(pipeline, tmp_path):
    c = ["--config", pipeline["run"] / "config.json", "--seed", 0]
    for preset in ("no_sem", "no_geo", "il_qa"):
        out = tmp_path / preset
        assert run("ablate", "--preset", preset, "--train", pipeline["data"], "--test", pipeline["data"],
                   "--scenes", pipeline["scenes"], "--out", out, "--steps", 2, *c) == 0
        cfg = json.loads((out / f"{preset}_seed0.config.json").read_text())
        assert cfg["preset"] == preset
        log = [json.loads(l) for l in (out / f"{preset}_seed0.train_log.jsonl").read_text().splitlines()]
        if preset == "il_qa":
            assert all(r["loss_crl"] == r["loss_sem"] == r["loss_epi"] == 0 for r in log)
        if preset == "no_sem":
            assert all(r["n_anchors"] == 0 for r in log)
    # a no_sem checkpoint has no map vector to export
    assert run("train", "--data", pipeline["data"], "--out", tmp_path / "ns", "--steps", 1,
               "--preset", "no_sem", *c) == 0
    assert run("export-embeddings", "--ckpt", tmp_path / "ns" / "params.ckpt", "--data", pipeline["data"],
               "--out", tmp_path / "e.csv") == 1


def test_export_embeddings(pipeline, tmp_path):
    ckpt = pipeline["run"] / "params.ckpt"
    out = tmp_path / "e.csv"
    assert run("export-embeddings", "--ckpt", ckpt, "--data", pipeline["data"], "--scenes", pipeline["scenes"],
               "--out", out) == 0
    rows = list(csv.reader(out.open()))
    header, body = rows[0], rows[1:]
    eps = Q.read_jsonl(pipeline["data"])
    assert len(body) == sum(len(e.queries) for e in eps)
    assert header[-2:] == ["pc1", "pc2"] and len({len(r) for r in rows}) == 1
    pcs = np.array([[float(r[-2]), float(r[-1])] for r in body])
    assert pcs[:, 0].var() >= pcs[:, 1].var()
    # empty data gives a header-only file
    (tmp_path / "empty.jsonl").write_text("")
    assert run("export-embeddings", "--ckpt", ckpt, "--data", tmp_path / "empty.jsonl", "--out", tmp_path / "h.csv") == 0
    assert len(list(csv.reader((tmp_path / "h.csv").open()))) == 1


def test_top2_projection_matches_eigendecomposition():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 6)) * np.array([5.0, 3.0, 1.0, 0.5, 0.2, 0.1])
    coords, vals = top2_projection(X)
    want = np.sort(np.linalg.eigvalsh(np.cov(X.T)))[::-1][:2]
    np.testing.assert_allclose(vals, want, rtol=1e-8)
    np.testing.assert_allclose(coords.var(axis=0, ddof=1), want, rtol=1e-8)


def test_ckpt_not_found(tmp_path, capsys):
    assert run("eval", "--ckpt", tmp_path / "x", "--data", tmp_path / "d", "--scenes", tmp_path, "--out",
               tmp_path / "r.json") == 1
    assert "ckpt: not found" in capsys.readouterr().err


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    text = capsys.readouterr().out
    assert "lr_peak" in text and "--preset" in text


def test_end_to_end_smoke_default_model(tmp_path):
    """20 episodes, 50 steps of the default model, then closed-loop evaluation."""
    t = time.time()
    out = suites.cli_pipeline(tmp_path, config={"train": {"epochs": 25}}, episodes=20, steps=50)
    assert time.time() - t < 300
    log = [json.loads(l) for l in out["log"].read_text().splitlines()]
    assert len(log) == 50 and all(np.isfinite(r["loss_total"]) for r in log)
    assert json.loads(out["report"].read_text())["n_episodes"] == 20

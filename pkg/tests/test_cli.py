import json

import numpy as np
import pytest

from enspost import cli
from enspost.metrics import read_score_rows
from enspost.preprocess import read_grd, write_grd

TINY = {
    "synth": {"height": 16, "width": 32, "n_dates": 40},
    "las": {"filter_size": 5, "gaussian_sigma": 3.0},
    "model": {"spread": {"n_inception_blocks": 1, "base_filters": 8}, "bias": {"unet_widths": [4, 8, 8]}},
    "train": {"spread": {"max_steps": 6, "eval_every": 3}, "bias": {"max_steps": 6, "eval_every": 3},
              "crps": {"max_steps": 6, "eval_every": 3}, "emos": {"max_steps": 20, "eval_every": 10}},
    "regions": {"north": "0:8,0:32"},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert cli.main(["pipeline", "--out", str(root / "run"), "--config", str(cfg)]) == 0
    return root / "run"


def test_pipeline_outputs(run):
    for rel in ("config.json", "las.grd", "models/B5.ckpt", "models/U5.ckpt", "models/B5U5C.ckpt",
                "models/EMOS5.json", "models/Lin5_mean.grd", "eval/test/aggregate.csv", "manifests/eval_test.json"):
        assert (run / rel).exists(), rel
    manifest = json.loads((run / "manifests" / "train_B5.json").read_text())
    assert manifest["git_describe"]
    assert len(manifest["inputs"]["dataset_manifest"]["sha256"]) == 64
    assert manifest["training"]["train_config"]["max_steps"] == 6


def test_eval_aggregates_roundtrip(run):
    agg = {r["model"]: r for r in cli.read_aggregate(run / "eval" / "test" / "aggregate.csv")}
    assert set(agg) == set(cli.DEFAULT_CONFIG["eval_models"])
    for name, row in agg.items():
        rows = read_score_rows(run / "eval" / "test" / f"{name}.csv")
        per_date = [v for d, r, _, v in rows if r == "global" and d != "all"]
        stored = [v for d, r, _, v in rows if r == "global" and d == "all"][0]
        assert np.mean(per_date) == pytest.approx(stored, rel=1e-12)
        assert row["crps"] == pytest.approx(stored, rel=1e-12)
        assert any(r == "north" for _, r, _, _ in rows)
    assert agg["E5"]["crpss_vs_E{n}"] == 0.0
    assert agg["E10"]["crpss_vs_E{full}"] == 0.0
    assert agg["E10"]["crps"] < agg["E5"]["crps"]


def test_eval_is_deterministic(run, tmp_path):
    before = (run / "eval" / "test" / "E5.csv").read_bytes()
    assert cli.main(["eval", "E5", "--out", str(run)]) == 0
    assert (run / "eval" / "test" / "E5.csv").read_bytes() == before


def test_dressed_flag_changes_raw_score(run, capsys):
    assert cli.main(["eval", "E5", "--out", str(run), "--split", "val"]) == 0
    emp = cli.read_aggregate(run / "eval" / "val" / "aggregate.csv")[0]["crps"]
    assert cli.main(["eval", "E5", "--out", str(run), "--split", "val", "--dressed"]) == 0
    dressed = cli.read_aggregate(run / "eval" / "val" / "aggregate.csv")[0]["crps"]
    assert emp != dressed


def test_compare_self_is_zero(run, capsys):
    assert cli.main(["compare", "E5", "E5", "--out", str(run)]) == 0
    diff, meta = read_grd(run / "compare" / "E5_vs_E5.grd")
    assert np.all(diff == 0)
    summary = json.loads((run / "compare" / "E5_vs_E5.json").read_text())
    assert summary["crpss_a_vs_b"] == 0.0 and summary["mean_difference"] == 0.0


def test_compare_region_and_sign(run):
    assert cli.main(["compare", "E10", "E5", "--out", str(run), "--region", "0:8,0:16", "--area-weighted"]) == 0
    summary = json.loads((run / "compare" / "E10_vs_E5.json").read_text())
    diff, _ = read_grd(run / "compare" / "E10_vs_E5.grd")
    assert summary["mean_difference"] == pytest.approx(summary["crps_a"] - summary["crps_b"])
    assert diff.shape == (1, 16, 32)


def test_unknown_model_id_exits_1_with_grammar(run, capsys):
    assert cli.main(["eval", "X7", "--out", str(run)]) == 1
    err = capsys.readouterr().err
    assert "E{n}" in err and "B{n}" in err


def test_missing_checkpoint_exits_1(tmp_path, run, capsys):
    empty = tmp_path / "r"
    (empty / "data").mkdir(parents=True)
    (empty / "data" / "manifest.json").write_text((run / "data" / "manifest.json").read_text())
    # manifest paths are relative to its directory, so point the copy back at the real samples
    (empty / "data" / "samples").symlink_to(run / "data" / "samples")
    (empty / "las.grd").write_bytes((run / "las.grd").read_bytes())
    (empty / "las.grd.json").write_bytes((run / "las.grd.json").read_bytes())
    assert cli.main(["eval", "B5", "--out", str(empty)]) == 1
    assert "checkpoint not found" in capsys.readouterr().err
    assert cli.main(["train", "B5U5C", "--out", str(tmp_path / "nothing")]) == 1


def test_bad_flags_exit_1(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval", "--split", "bogus", "--out", str(tmp_path)])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 1
    assert cli.main(["eval", "E5", "--out", str(tmp_path), "--region", "9:1,0:3"]) == 1


def test_runtime_failure_exits_2(monkeypatch, tmp_path):
    def boom(args):
        raise RuntimeError("disk on fire")
    monkeypatch.setitem(cli.COMMANDS, "synth", boom)
    assert cli.main(["synth", "--out", str(tmp_path)]) == 2


def test_train_raw_is_noop(run, capsys):
    assert cli.main(["train", "E5", "--out", str(run)]) == 0
    assert "nothing to train" in capsys.readouterr().out


def test_seed_override_changes_data(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth": {"height": 8, "width": 16, "n_dates": 10}}))
    for seed in (1, 2):
        assert cli.main(["synth", "--out", str(tmp_path / f"s{seed}"), "--config", str(cfg), "--seed", str(seed)]) == 0
    a, _ = read_grd(tmp_path / "s1" / "data" / "samples" / "date00000.grd")
    b, _ = read_grd(tmp_path / "s2" / "data" / "samples" / "date00000.grd")
    assert not np.array_equal(a, b)
    saved = json.loads((tmp_path / "s2" / "config.json").read_text())
    assert saved["synth"]["seed"] == 2 and saved["train"]["bias"]["seed"] == 2


# -- heatmap ------------------------------------------------------------------------------

def test_diverging_ramp_endpoints():
    rgb = cli.diverging_rgb(np.array([[-2.0, 0.0, 2.0, np.nan, 1.0]]))
    assert tuple(rgb[0, 0]) == (33, 102, 172)
    assert tuple(rgb[0, 1]) == (255, 255, 255)
    assert tuple(rgb[0, 2]) == (178, 24, 43)
    assert tuple(rgb[0, 3]) == (128, 128, 128)
    assert tuple(rgb[0, 4]) == tuple(np.rint((np.array([255.0] * 3) + cli.RAMP_POS) / 2).astype(int))
    assert np.all(cli.diverging_rgb(np.zeros((2, 2))) == 255)


def test_heatmap_ppm(tmp_path):
    field = np.linspace(-1, 1, 6 * 8).reshape(1, 6, 8).astype(np.float32)
    write_grd(tmp_path / "m.grd", field)
    assert cli.main(["heatmap", str(tmp_path / "m.grd"), "--out", str(tmp_path / "m.ppm"), "--scale", "3"]) == 0
    raw = (tmp_path / "m.ppm").read_bytes()
    assert raw.startswith(b"P6\n24 18\n255\n")
    img = cli.read_ppm(tmp_path / "m.ppm")
    assert img.shape == (18, 24, 3)
    assert tuple(img[0, 0]) == (33, 102, 172) and tuple(img[-1, -1]) == (178, 24, 43)
    assert cli.main(["heatmap", str(tmp_path / "missing.grd"), "--out", str(tmp_path)]) == 1
    assert cli.main(["heatmap", str(tmp_path / "m.grd"), "--out", str(tmp_path), "--channel", "3"]) == 1

"""End-to-end CLI tests: exit codes, artifacts, and manifests.

One module-scoped workspace runs the full chain (synth, train, embed,
probe, analyze, attribute) through cli.main at a small scale; the tests
then assert on the artifacts each command left behind. Error-path tests
run against the same workspace where they need real inputs.
"""

import json
from types import SimpleNamespace

import numpy as np
import pytest

from dynaclr.cli import main
from dynaclr.model import Checkpoint, EmbeddingTable
from dynaclr.probe import ProbeModel
from dynaclr.repro import MANIFEST_FILE, read_manifest
from dynaclr.sampling import STRATEGIES


def run(argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Workspace with every pipeline artifact produced via the CLI."""
    root = tmp_path_factory.mktemp("cli_ws")
    paths = SimpleNamespace(
        data=root / "ds",
        ckpt_dir=root / "ckpt",
        emb=root / "emb",
        emb_replay=root / "emb_replay",
        probe=root / "probe",
        analyze=root / "analyze",
        attr=root / "attr",
    )
    steps = [
        ["synth", "--out", paths.data, "--seed", 7, "--fovs", 2,
         "--cells", 8, "--frames", 8],
        ["train", "--data", paths.data, "--out", paths.ckpt_dir,
         "--strategy", "cell-time", "--tau", 1, "--scale", "desk",
         "--epochs", 2, "--seed", 3, "--batch-size", 16, "--lr", 1e-3,
         "--fovs", "A1"],
        ["embed", "--data", paths.data,
         "--ckpt", paths.ckpt_dir / "checkpoint.bin", "--out", paths.emb],
        ["embed", "--data", paths.data,
         "--ckpt", paths.ckpt_dir / "checkpoint.bin",
         "--out", paths.emb_replay],
        ["probe", "--emb", paths.emb, "--label-type", "infection",
         "--split", 0.5, "--seed", 1, "--out", paths.probe],
        ["analyze", "smoothness", "--emb", paths.emb,
         "--out", paths.analyze / "smoothness", "--tau-max", 3],
        ["analyze", "pca", "--emb", paths.emb,
         "--out", paths.analyze / "pca", "-k", 2],
        ["analyze", "rank", "--emb", paths.emb,
         "--out", paths.analyze / "rank"],
        ["analyze", "features", "--emb", paths.emb,
         "--out", paths.analyze / "features", "--n-pcs", 2],
        ["analyze", "fractions", "--data", paths.data,
         "--out", paths.analyze / "fractions"],
    ]
    for argv in steps:
        code = run(argv)
        assert code == 0, f"cli {argv[0]} exited {code}"

    emb = EmbeddingTable.load(paths.emb)
    key = emb.keys[0]
    paths.attr_key = f"{key[0]},{key[1]},{key[2]}"
    for method, extra in (
        ("occlusion", ["--window", "5,8,8", "--stride", "5,8,8"]),
        ("ig", ["--steps", 8]),
    ):
        code = run(["attribute", method, "--data", paths.data,
                    "--ckpt", paths.ckpt_dir / "checkpoint.bin",
                    "--probe", paths.probe / "probe_model.json",
                    "--key", paths.attr_key, "--out", paths.attr] + extra)
        assert code == 0, f"cli attribute {method} exited {code}"
    return paths


# -- argument handling -----------------------------------------------------


def test_no_command_exits_one(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_flag_exits_one(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"), "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_version_flag_exits_zero(capsys):
    assert main(["--version"]) == 0
    assert "dynaclr" in capsys.readouterr().out


def test_strategy_aliases_resolve():
    from dynaclr.cli import _parse_strategy

    assert _parse_strategy("cell-time") == "cell_time_aware"
    assert _parse_strategy("cell-aware") == "cell_aware"
    assert _parse_strategy("cell") == "cell_aware"
    assert _parse_strategy("classical") == "classical"
    for alias in ("cell_time_aware", "cell_aware"):
        assert _parse_strategy(alias) in STRATEGIES
    with pytest.raises(Exception, match="unknown strategy"):
        _parse_strategy("contrastive")


def test_unknown_strategy_exits_one(ws, tmp_path, capsys):
    code = run(["train", "--data", ws.data, "--out", tmp_path / "ckpt",
                "--strategy", "bogus"])
    assert code == 1
    assert "unknown strategy" in capsys.readouterr().err


def test_missing_dataset_exits_one(tmp_path, capsys):
    code = run(["embed", "--data", tmp_path / "nope",
                "--ckpt", tmp_path / "nope.bin", "--out", tmp_path / "emb"])
    assert code == 1


def test_invalid_config_json_exits_one(tmp_path, capsys):
    bad = tmp_path / "cfg.json"
    bad.write_text("{not json")
    code = run(["synth", "--out", tmp_path / "ds", "--config", bad])
    assert code == 1
    assert "invalid JSON" in capsys.readouterr().err


def test_probe_split_validated_before_io(tmp_path, capsys):
    code = run(["probe", "--emb", tmp_path / "absent", "--split", 1.5,
                "--out", tmp_path / "m.json"])
    assert code == 1
    assert "--split" in capsys.readouterr().err


def test_bad_attribution_key_exits_one(ws, tmp_path, capsys):
    code = run(["attribute", "occlusion", "--data", ws.data,
                "--ckpt", ws.ckpt_dir / "checkpoint.bin",
                "--probe", ws.probe / "probe_model.json",
                "--key", "A1,zero,3", "--out", tmp_path])
    assert code == 1
    assert "--key" in capsys.readouterr().err


# -- synth ----------------------------------------------------------------


def test_synth_writes_dataset_and_manifest(ws):
    assert (ws.data / "meta.json").exists()
    manifest = read_manifest(ws.data)
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 7
    assert manifest["argv"][0] == "synth"
    assert manifest["outputs"]["dataset"] == str(ws.data)
    assert manifest["code_checksum"]
    assert manifest["config"]["n_fovs"] == 2
    assert manifest["config"]["cells_per_fov"] == 8


def test_synth_refuses_overwrite_without_flag(ws, capsys):
    assert run(["synth", "--out", ws.data, "--seed", 7]) == 1
    assert "not empty" in capsys.readouterr().err


# -- train ----------------------------------------------------------------


def test_train_writes_checkpoint_and_loss_log(ws):
    ckpt = Checkpoint.load(ws.ckpt_dir / "checkpoint.bin")
    assert ckpt.epoch == 2
    assert len(ckpt.loss_log) == 2
    log = json.loads((ws.ckpt_dir / "loss_log.json").read_text())
    assert [e["epoch"] for e in log["loss_log"]] == [0, 1]
    manifest = read_manifest(ws.ckpt_dir)
    assert manifest["command"] == "train"
    assert manifest["seed"] == 3
    assert manifest["inputs"]["data"] == str(ws.data)
    assert manifest["model_checksum"] == ckpt.param_checksum()
    assert manifest["config"]["sampler"]["strategy"] == "cell_time_aware"
    assert manifest["config"]["fovs"] == ["A1"]


# -- embed ----------------------------------------------------------------


def test_embed_writes_table_with_dataset_pointer(ws):
    emb = EmbeddingTable.load(ws.emb)
    assert len(emb) > 0
    assert emb.extra["data_dir"] == str(ws.data.resolve())
    assert emb.config["patch_spec"]
    manifest = read_manifest(ws.emb)
    assert manifest["command"] == "embed"
    assert manifest["model_checksum"] == emb.model_checksum


def test_embed_rerun_is_byte_identical(ws):
    first = (ws.emb / "features.bin").read_bytes()
    second = (ws.emb_replay / "features.bin").read_bytes()
    assert first == second
    assert (ws.emb / "index.csv").read_bytes() == (
        ws.emb_replay / "index.csv").read_bytes()


# -- probe ----------------------------------------------------------------


def test_probe_writes_metrics_model_predictions(ws):
    metrics = json.loads((ws.probe / "metrics.json").read_text())
    for field in ("accuracy", "f1", "solver_status", "split_checksum",
                  "n_train", "n_eval"):
        assert field in metrics
    assert 0.0 <= metrics["accuracy"] <= 1.0
    assert 0.0 <= metrics["f1"] <= 1.0
    model = ProbeModel.load(ws.probe / "probe_model.json")
    assert model.label_type == "infection"
    assert len(model.train_keys) == metrics["n_train"]
    emb = EmbeddingTable.load(ws.emb)
    predictions = json.loads((ws.probe / "predictions.json").read_text())
    assert len(predictions) == len(emb)
    assert all(0.0 < p["probability"] < 1.0 for p in predictions)
    manifest = read_manifest(ws.probe)
    assert manifest["command"] == "probe"
    assert manifest["seed"] == 1


def test_probe_accepts_metrics_file_path(ws, tmp_path):
    out = tmp_path / "probe2" / "metrics.json"
    code = run(["probe", "--emb", ws.emb, "--split", 0.5, "--seed", 1,
                "--out", out])
    assert code == 0
    assert out.exists()
    assert (out.parent / "probe_model.json").exists()


# -- analyze --------------------------------------------------------------


def test_analyze_smoothness_outputs(ws):
    payload = json.loads(
        (ws.analyze / "smoothness" / "smoothness.json").read_text())
    assert payload["taus"][0] == 0
    assert payload["mean"][0] == 0.0
    assert payload["space"] == "features"
    assert len(payload["taus"]) == len(payload["mean"]) == len(payload["count"])
    assert (ws.analyze / "smoothness" / "smoothness.png").exists()
    assert (ws.analyze / "smoothness" / MANIFEST_FILE).exists()


def test_analyze_pca_outputs(ws):
    payload = json.loads((ws.analyze / "pca" / "pca.json").read_text())
    ratios = payload["explained_variance_ratio"]
    assert len(ratios) == 2
    assert ratios[0] >= ratios[1] >= 0.0
    emb = EmbeddingTable.load(ws.emb)
    lines = (ws.analyze / "pca" / "projection.csv").read_text().splitlines()
    assert lines[0] == "fov_id,track_id,t,pc1,pc2"
    assert len(lines) == len(emb) + 1
    assert (ws.analyze / "pca" / "pca.png").exists()


def test_analyze_rank_output(ws):
    payload = json.loads((ws.analyze / "rank" / "rank.json").read_text())
    emb = EmbeddingTable.load(ws.emb)
    assert 1 <= payload["rank"] <= payload["feature_dim"]
    assert payload["rows"] == len(emb)


def test_analyze_features_outputs(ws):
    emb = EmbeddingTable.load(ws.emb)
    lines = (ws.analyze / "features" / "features.csv").read_text().splitlines()
    assert len(lines) == len(emb) + 1
    corr = json.loads(
        (ws.analyze / "features" / "correlations.json").read_text())
    assert corr["n_pcs"] == 2
    rows = corr["spearman"]
    assert len(rows) == len(corr["feature_names"])
    assert all(len(r) == 2 for r in rows)
    flat = [v for row in rows for v in row if v is not None]
    assert all(-1.0 <= v <= 1.0 for v in flat)


def test_analyze_fractions_outputs(ws):
    payload = json.loads(
        (ws.analyze / "fractions" / "fractions.json").read_text())
    assert set(payload["series"]) == {"mock", "moi5"}
    mock = payload["series"]["mock"]
    assert all(point["fraction"] == 0.0 for point in mock)
    assert all(point["n"] > 0 for point in mock)
    infected = [p["fraction"] for p in payload["series"]["moi5"]]
    assert max(infected) > 0.0
    assert len(payload["smoothed_fraction"]["moi5"]) == len(infected)


# -- attribute ------------------------------------------------------------


def test_attribute_writes_map_sidecar_panel(ws):
    key = ws.attr_key.replace(",", "_")
    for method in ("occlusion", "ig"):
        base = ws.attr / f"{method}_{key}"
        sidecar = json.loads(base.with_suffix(".json").read_text())
        raw = np.fromfile(base.with_suffix(".bin"), dtype="<f4")
        assert raw.size == int(np.prod(sidecar["shape"]))
        assert np.all(np.isfinite(raw))
        assert base.with_suffix(".png").exists()
        expected = "occlusion" if method == "occlusion" else "integrated_gradients"
        assert sidecar["method"] == expected
        assert sidecar["head"] == "infection"
    manifest = read_manifest(ws.attr)
    assert manifest["command"] == "attribute"
    assert manifest["model_checksum"]

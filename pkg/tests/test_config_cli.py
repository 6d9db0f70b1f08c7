import json

import numpy as np
import pytest

from mtsloc.cli import main
from mtsloc.config import DEFAULT_CONFIG, RunConfig, default_config, substream_seed
from mtsloc.errors import ConfigError, MissingArtifactError
from mtsloc.pipeline import Manifest, run_pipeline

SMALL = """\
[run]
seed = 5
out_dir = out

[data]
source = wvs
length = 3000
train_fraction = 0.5
anomaly_specs = 3:300:339:constant_outlier; 7:800:839:additive_offset

[model]
d_model = 8
H = 2
L = 1
T = 20
lam = 0.0
max_epochs = 2
patience = 2

[detect]
K = auto
reset_per_window = true

[localize]
method = spearman
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return path


def test_default_config_round_trip_is_fixed_point():
    cfg = default_config()
    text = cfg.to_text()
    again = RunConfig.from_text(text)
    assert again == cfg
    assert again.to_text() == text
    assert len(cfg.wvs_config().anomaly_specs) >= 6
    cfg.validate()


def test_small_config_round_trip(small_cfg):
    cfg = RunConfig.load(small_cfg)
    assert RunConfig.from_text(cfg.to_text()).to_text() == cfg.to_text()
    assert cfg.seed == 5 and cfg.model_kwargs()["T"] == 20


def test_validation_lists_all_problems():
    text = DEFAULT_CONFIG.replace("H = 4", "H = 5").replace("method = spearman", "method = pearson") + "bogus = 1\n"
    with pytest.raises(ConfigError) as info:
        RunConfig.from_text(text).validate()
    msg = str(info.value)
    assert "divisible" in msg and "pearson" in msg and "bogus" in msg


def test_config_errors():
    with pytest.raises(ConfigError):
        RunConfig.from_text("[nope]\na = 1\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("[run]\nseed = x\n")
    cfg = RunConfig.from_text("[data]\nsource = csv\ntrain_path = missing.csv\ntest_path = missing.csv\n")
    with pytest.raises(ConfigError, match="does not exist"):
        cfg.validate()


def test_seed_substreams_are_distinct_and_stable():
    assert substream_seed(0, "data") == substream_seed(0, "data")
    assert len({substream_seed(0, n) for n in ("data", "init", "shuffle")}) == 3
    cfg = default_config()
    assert cfg.wvs_config().seed == substream_seed(0, "data")
    assert cfg.model_kwargs()["seed"] == substream_seed(0, "init")


def test_generate_stage_writes_manifest(small_cfg, tmp_path):
    out = tmp_path / "run"
    status = run_pipeline(RunConfig.load(small_cfg), ["generate"], out_dir=out)
    assert status == {"generate": "ran"}
    for name in ("train.csv", "test.csv", "labels.csv", "point_labels.csv", "meta.json", "wvs.cfg"):
        assert (out / "generate" / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["stages"]["generate"]["artifacts"]) == {
        "generate/train.csv", "generate/test.csv", "generate/labels.csv", "generate/point_labels.csv",
        "generate/meta.json", "generate/wvs.cfg"}
    assert "config_hash" in manifest and "versions" in manifest


def test_missing_checkpoint_names_train_stage(small_cfg, tmp_path):
    out = tmp_path / "run"
    run_pipeline(RunConfig.load(small_cfg), ["generate"], out_dir=out)
    with pytest.raises(MissingArtifactError, match="train"):
        run_pipeline(RunConfig.load(small_cfg), ["localize"], out_dir=out)
    assert main(["--config", str(small_cfg), "--out", str(out), "localize"]) == 3


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg_path = root / "small.cfg"
    cfg_path.write_text(SMALL)
    out = root / "out"
    assert main(["--config", str(cfg_path), "--out", str(out), "run"]) == 0
    assert main(["--config", str(cfg_path), "--out", str(out), "sweep"]) == 0
    return cfg_path, out


def test_full_pipeline_artifacts(full_run):
    _, out = full_run
    for rel in ("train/model.npz", "train/training_log.csv", "detect/detection.csv", "detect/detection.json",
                "localize/c_combined.csv", "localize/segments.json", "evaluate/metrics.json", "sweep/sweep.csv"):
        assert (out / rel).exists(), rel
    metrics = json.loads((out / "evaluate" / "metrics.json").read_text())
    assert {"detection", "timestep", "segment", "window_sweep", "config"} <= set(metrics)
    seg = json.loads((out / "localize" / "segments.json").read_text())["segments"]
    assert len(seg) == 2 and all(set(s) >= {"c1", "c2", "c_combined", "p", "thresholds"} for s in seg)
    assert Manifest(out).verify() == []


def test_rerun_is_noop_unless_forced(full_run):
    cfg_path, out = full_run
    cfg = RunConfig.load(cfg_path)
    before = (out / "evaluate" / "metrics.json").read_text()
    assert set(run_pipeline(cfg, ["generate", "train", "detect", "localize", "evaluate"], out_dir=out).values()) == {"skipped"}
    assert run_pipeline(cfg, ["evaluate"], out_dir=out, force=True) == {"evaluate": "ran"}
    assert (out / "evaluate" / "metrics.json").read_text() == before


def test_same_seed_gives_identical_metrics(full_run, tmp_path):
    cfg_path, out = full_run
    other = tmp_path / "again"
    assert main(["--config", str(cfg_path), "--out", str(other), "run"]) == 0
    assert (other / "evaluate" / "metrics.json").read_text() == (out / "evaluate" / "metrics.json").read_text()


def test_tampering_is_detected(full_run, tmp_path):
    import shutil

    _, out = full_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    (copy / "detect" / "detection.json").write_text("{}")
    problems = Manifest(copy).verify()
    assert any("detection.json" in p for p in problems)
    # a tampered upstream artifact makes the stage rerun
    cfg = RunConfig.load(full_run[0])
    assert run_pipeline(cfg, ["detect"], out_dir=copy) == {"detect": "ran"}


def test_changed_config_reruns_downstream(full_run, tmp_path):
    import shutil

    cfg_path, out = full_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    cfg = RunConfig.load(cfg_path)
    cfg.localize["w2"] = "3"
    status = run_pipeline(cfg, ["generate", "localize"], out_dir=copy)
    assert status["localize"] == "ran"


def test_cli_exit_codes(small_cfg, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(SMALL.replace("H = 2", "H = 3"))
    assert main(["--config", str(bad), "generate"]) == 2
    assert main(["--config", str(tmp_path / "absent.cfg"), "generate"]) == 2
    assert main(["--config", str(small_cfg), "show-config"]) == 0
    assert "[model]" in capsys.readouterr().out


def test_cli_flags_before_and_after_subcommand(small_cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--config", str(small_cfg), "--seed", "9", "--out", str(a), "generate"]) == 0
    assert main(["generate", "--config", str(small_cfg), "--seed", "9", "--out", str(b)]) == 0
    ta = (a / "generate" / "test.csv").read_text()
    assert ta == (b / "generate" / "test.csv").read_text()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seed"] == 9


def test_numerical_failure_exit_code(small_cfg, tmp_path, monkeypatch):
    import mtsloc.pipeline as pipeline
    from mtsloc.errors import NumericalError

    def boom(*a, **k):
        raise NumericalError("non-finite loss at epoch 0, step 0")

    out = tmp_path / "run"
    assert main(["--config", str(small_cfg), "--out", str(out), "generate"]) == 0
    monkeypatch.setattr(pipeline, "train", boom)
    assert main(["--config", str(small_cfg), "--out", str(out), "train"]) == 4


def test_csv_source(tmp_path):
    rng = np.random.default_rng(0)
    np.savetxt(tmp_path / "train.csv", rng.normal(size=(200, 3)), delimiter=",")
    test = rng.normal(size=(100, 3))
    test[40:50, 1] += 6
    np.savetxt(tmp_path / "test.csv", test, delimiter=",")
    labels = np.zeros((100, 3), dtype=int)
    labels[40:50, 1] = 1
    np.savetxt(tmp_path / "labels.csv", labels, delimiter=",", fmt="%d")
    text = SMALL.split("[data]")[0] + (
        "[data]\nsource = csv\ntrain_path = train.csv\ntest_path = test.csv\nlabels_path = labels.csv\n\n"
        "[model]\nd_model = 8\nH = 2\nL = 1\nT = 20\nlam = 0.0\nmax_epochs = 2\npatience = 2\n")
    (tmp_path / "c.cfg").write_text(text)
    out = tmp_path / "out"
    assert main(["--config", str(tmp_path / "c.cfg"), "--out", str(out), "run"]) == 0
    metrics = json.loads((out / "evaluate" / "metrics.json").read_text())
    assert "segment" in metrics

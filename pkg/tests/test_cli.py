import json
import shutil
from pathlib import Path

import pytest

from dae_refine import cli
from dae_refine.config import ExperimentConfig

TINY = Path(__file__).resolve().parents[1] / "configs" / "tiny.json"
PIPELINE = (
    ["datagen"],
    ["train-segmenter"],
    ["train-dae", "--scenario", "prediction"],
    ["train-dae", "--scenario", "groundtruth"],
    ["sweep"],
    ["eval"],
    ["scorefield"],
)


def run(args, out):
    return cli.main([*args, "--config", str(TINY), "--out", str(out)])


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    """The tiny pipeline, run twice into separate directories."""
    outs = []
    for name in ("a", "b"):
        out = tmp_path_factory.mktemp(name)
        for args in PIPELINE:
            assert run(args, out) == 0, args
        outs.append(out)
    return outs


def test_pipeline_writes_all_artifacts(pipeline_runs):
    out = pipeline_runs[0]
    for name in ("eval.csv", "sweep_prediction.csv", "sweep_groundtruth.csv", "scorefield.csv", "crf.json"):
        assert (out / name).exists(), name
    rows = (out / "eval.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["feedforward", "+CRF", "+DAE(y_true)", "+DAE(y)"]


def test_manifest_records_hash_seed_and_versions(pipeline_runs):
    out = pipeline_runs[0]
    cfg = ExperimentConfig.load(TINY)
    for cmd in ("datagen", "train-dae_prediction", "train-dae_groundtruth", "eval"):
        m = json.loads((out / f"manifest_{cmd}.json").read_text())
        assert m["config_sha256"] == cfg.digest()
        assert m["seed"] == 0
        assert {"numpy", "python", "dae_refine"} <= set(m["versions"])
    assert ExperimentConfig.load(out / "config.json") == cfg


def test_rerun_is_byte_identical(pipeline_runs):
    a, b = pipeline_runs
    for csv_path in sorted(a.glob("*.csv")):
        assert csv_path.read_bytes() == (b / csv_path.name).read_bytes(), csv_path.name


def test_missing_prerequisite_exits_3(tmp_path):
    assert run(["eval"], tmp_path) == 3
    assert run(["train-segmenter"], tmp_path) == 3
    assert run(["train-dae", "--scenario", "prediction"], tmp_path) == 3


def test_sweep_needs_both_daes(pipeline_runs, tmp_path):
    out = tmp_path / "partial"
    shutil.copytree(pipeline_runs[0], out)
    shutil.rmtree(out / "dae_groundtruth")
    assert run(["sweep"], out) == 3
    assert run(["sweep", "--scenario", "prediction"], out) == 0


def test_invalid_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"corpus": {"n_trian": 3}}))
    assert cli.main(["datagen", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text("{not json")
    assert cli.main(["datagen", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text(json.dumps({"dae": {"model": {"h_channels": 7}}}))
    assert cli.main(["datagen", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_bad_arguments_exit_2(tmp_path):
    assert cli.main(["train-dae", "--scenario", "other", "--out", str(tmp_path)]) == 2
    assert cli.main(["no-such-command"]) == 2
    assert cli.main(["train-dae", "--out", str(tmp_path)]) == 2


def test_seed_override_and_config_clash(tmp_path):
    assert run(["datagen"], tmp_path) == 0
    # a different master seed is a different config: refuse to mix it into the same directory
    assert cli.main(["datagen", "--config", str(TINY), "--out", str(tmp_path), "--seed", "4"]) == 2
    other = tmp_path / "seed4"
    assert cli.main(["datagen", "--config", str(TINY), "--out", str(other), "--seed", "4"]) == 0
    m = json.loads((other / "manifest_datagen.json").read_text())
    assert m["seed"] == 4
    assert (other / "corpus" / "train.cstn").read_bytes() != (tmp_path / "corpus" / "train.cstn").read_bytes()


def test_config_echoed(tmp_path, capsys):
    assert run(["datagen"], tmp_path) == 0
    err = capsys.readouterr().err
    assert json.loads(err[: err.rindex("}") + 1]) == ExperimentConfig.load(TINY).to_dict()

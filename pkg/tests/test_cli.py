"""End-to-end CLI tests on tiny configurations."""

import numpy as np
import pytest

from metaboot.cli import main
from metaboot.io import load_checkpoint
from metaboot.synthdata import load_dataset

TINY_TRAIN = ["--meta-steps", "2", "--eval-episodes", "4", "--eval-inner-steps", "2",
              "--L", "2", "--delta", "1", "--data-per-class", "20"]


@pytest.fixture(scope="module")
def dataset_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "synth.bmsd"
    assert main(["gen-data", "--classes", "8", "--per-class", "20",
                 "--seed", "7", "--out", str(path)]) == 0
    return str(path)


def test_gen_data_deterministic(tmp_path, dataset_file):
    other = tmp_path / "again.bmsd"
    assert main(["gen-data", "--classes", "8", "--per-class", "20",
                 "--seed", "7", "--out", str(other)]) == 0
    assert other.read_bytes() == open(dataset_file, "rb").read()
    ds = load_dataset(other)
    assert len(ds) == 160


def test_train_eval_roundtrip(tmp_path, dataset_file, capsys):
    out = tmp_path / "run"
    code = main(["train", "--mode", "bmssl", "--data", dataset_file,
                 "--out-dir", str(out), "--seed", "3", *TINY_TRAIN])
    assert code == 0
    checkpoint = load_checkpoint(out / "checkpoint.bmsl")
    assert checkpoint.meta_step == 2
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert len(metrics) == 3  # header + one row per meta step
    assert metrics[1].split(",")[5] == ""  # no wallclock cell by default

    code = main(["eval", "--checkpoint", str(out / "checkpoint.bmsl"),
                 "--data", dataset_file, "--episodes", "4",
                 "--out", str(tmp_path / "eval.csv")])
    assert code == 0
    assert "mean_accuracy=" in capsys.readouterr().out
    assert (tmp_path / "eval.csv").read_text().startswith("episode,accuracy")


def test_train_byte_identical_reruns(tmp_path, dataset_file):
    # The exact same command twice (the checkpoint embeds its config,
    # including paths, so the output directory must match too).
    out = tmp_path / "run"
    cmd = ["train", "--mode", "metassl", "--data", dataset_file,
           "--out-dir", str(out), "--seed", "5", *TINY_TRAIN]
    assert main(cmd) == 0
    first = ((out / "metrics.csv").read_bytes(),
             (out / "checkpoint.bmsl").read_bytes())
    assert main(cmd) == 0
    assert (out / "metrics.csv").read_bytes() == first[0]
    assert (out / "checkpoint.bmsl").read_bytes() == first[1]


def test_meta_steps_zero_keeps_init(tmp_path, dataset_file):
    out = tmp_path / "frozen"
    assert main(["train", "--mode", "bmssl", "--data", dataset_file,
                 "--out-dir", str(out), "--seed", "3", "--meta-steps", "0",
                 "--eval-episodes", "2", "--data-per-class", "20"]) == 0
    frozen = load_checkpoint(out / "checkpoint.bmsl")
    out2 = tmp_path / "scratch"
    assert main(["train", "--mode", "scratch", "--data", dataset_file,
                 "--out-dir", str(out2), "--seed", "3", "--meta-steps", "50",
                 "--eval-episodes", "2", "--data-per-class", "20"]) == 0
    scratch = load_checkpoint(out2 / "checkpoint.bmsl")
    for name in frozen.params:
        assert np.array_equal(frozen.params[name].data, scratch.params[name].data)


def test_config_file_plus_override(tmp_path, dataset_file):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("mode=metassl\nmeta_steps=1\neval_episodes=2\n"
                   "eval_inner_steps=1\nL=1\ndata_per_class=20\n")
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--mode", "metric-only",
                 "--data", dataset_file, "--out-dir", str(out), "--seed", "2"]) == 0
    checkpoint = load_checkpoint(out / "checkpoint.bmsl")
    assert checkpoint.config.mode == "metric-only"  # flag beats file
    assert checkpoint.config.meta_steps == 1


def test_exit_codes(tmp_path, dataset_file):
    # 2: validation
    assert main(["train", "--data", dataset_file, "--out-dir", str(tmp_path / "x"),
                 "--alpha", "-1"]) == 2
    # 3: i/o
    assert main(["train", "--data", str(tmp_path / "missing.bmsd"),
                 "--out-dir", str(tmp_path / "y"), *TINY_TRAIN]) == 3
    # eval on a non-checkpoint file
    assert main(["eval", "--checkpoint", dataset_file]) == 2


def test_gradcheck_cli_fault_injection(capsys):
    assert main(["gradcheck", "--scale", "tiny", "--inject-fault"]) == 5
    out = capsys.readouterr().out
    assert "FAIL" in out


def test_spectral_demo_csvs(tmp_path):
    out = tmp_path / "spec"
    assert main(["spectral-demo", "--views", "6", "--sources", "3", "--d", "2",
                 "--samples", "50", "--seed", "1", "--out-dir", str(out)]) == 0
    spectrum = (out / "spectrum.csv").read_text().splitlines()
    assert spectrum[0] == "index,eigenvalue"
    assert len(spectrum) == 7
    gaps = (out / "gaps.csv").read_text().splitlines()
    assert gaps[0] == "subspace_id,gap"
    assert len(gaps) == 52
    eig_gap = float(gaps[1].split(",")[1])
    rivals = [float(line.split(",")[1]) for line in gaps[2:]]
    assert eig_gap <= min(rivals) + 1e-9


def test_ablate_cli_smoke(tmp_path, dataset_file):
    out = tmp_path / "sweep.csv"
    assert main(["ablate", "--kind", "structure", "--data", dataset_file,
                 "--out", str(out), "--meta-steps", "1", "--eval-episodes", "2",
                 "--L", "1", "--delta", "1", "--data-per-class", "20"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "kind,cell,accuracy,steps_per_sec"
    assert [line.split(",")[1] for line in lines[1:]] == ["M1", "M2", "M3"]

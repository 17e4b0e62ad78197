import dataclasses

import numpy as np
import pytest

from metaboot.config import RunConfig, load_config, parse_config_text, serialize_config
from metaboot.errors import ValidationError
from metaboot.io import METRICS_HEADER, MetricsWriter, load_checkpoint, save_checkpoint
from metaboot.model import init_params


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.mode == "bmssl" and cfg.way == 4


def test_parse_roundtrip():
    cfg = RunConfig(mode="metassl", alpha=0.02, lam=0.5, seed=9)
    again = parse_config_text(serialize_config(cfg))
    assert again == cfg


def test_parse_overrides_and_comments():
    text = "# comment\nmode=scratch\nlambda=0.25  # inline\nN=8\nK=2\n"
    cfg = parse_config_text(text)
    assert cfg.mode == "scratch" and cfg.lam == 0.25 and cfg.way == 4


@pytest.mark.parametrize("line", [
    "mode=warp", "N=7", "M1=6", "alpha=0", "beta=-1", "level=A9",
    "unknown_key=3", "N=abc", "just a line",
])
def test_parse_rejects(line):
    with pytest.raises(ValidationError):
        parse_config_text(line + "\n")


def test_bmssl_needs_delta():
    with pytest.raises(ValidationError):
        RunConfig(mode="bmssl", delta=0).validate()
    RunConfig(mode="metassl", delta=0).validate()  # delta unused there


def test_load_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("mode=metric-only\nmeta_steps=3\n")
    cfg = load_config(path)
    assert cfg.mode == "metric-only" and cfg.meta_steps == 3


def test_checkpoint_roundtrip_bitwise(tmp_path):
    params = init_params(64, 8, 4, 3, seed=5)
    cfg = RunConfig(mode="metassl", seed=3)
    path = tmp_path / "model.bmsl"
    save_checkpoint(path, params, cfg, meta_step=17)
    loaded = load_checkpoint(path)
    assert loaded.version == 1
    assert loaded.meta_step == 17
    assert loaded.config == cfg
    assert loaded.params.names == params.names
    for name in params:
        assert np.array_equal(loaded.params[name].data, params[name].data)
    # Saving the loaded checkpoint reproduces the file byte for byte.
    path2 = tmp_path / "model2.bmsl"
    save_checkpoint(path2, loaded.params, loaded.config, loaded.meta_step)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bmsl"
    path.write_bytes(b"XXXX" + b"\0" * 16)
    with pytest.raises(ValidationError):
        load_checkpoint(path)


def test_metrics_writer_schema(tmp_path):
    path = tmp_path / "metrics.csv"
    with MetricsWriter(path) as writer:
        writer.write(0, 1.5, None, 2.0, None, None)
        writer.write(1, 1.25, 0.125, 1.75, 0.5, None)
        with pytest.raises(ValidationError):
            writer.write(1, 0.0, None, 0.0)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    assert lines[1] == "0,1.5,,2.0,,"
    assert lines[2] == "1,1.25,0.125,1.75,0.5,"


def test_config_replaced_validates():
    cfg = RunConfig().validate()
    with pytest.raises(ValidationError):
        cfg.replaced(alpha=-1.0)
    assert cfg.replaced(delta=10).delta == 10
    assert dataclasses.asdict(cfg)  # plain dataclass, serializable

import json

import numpy as np
import pytest

from v2ifuse.comm import full_map_bytes
from v2ifuse.harness.cli import main, read_pgm, write_pgm

TINY = """\
suite: {n_occluded: 2, n_open: 1, n_train_scenes: 2}
training: {steps: 3, degrade_factors: [4]}
model: {channels: 4, decoder_hidden: 4}
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "tiny.yaml"
    cfg.write_text(TINY)
    assert main(["train", "-c", str(cfg), "-o", str(d / "train"), "-q"]) == 0
    return cfg, d / "train" / "params.npz"


def test_train_outputs(trained):
    cfg, params = trained
    assert params.exists()
    summary = json.loads((params.parent / "train.json").read_text())
    assert summary["steps"] == 3
    text = (params.parent / "train.csv").read_text()
    assert "# training.steps: 3" in text and "# defaults_applied:" in text


def test_simulate_check_is_byte_identical(trained, tmp_path):
    cfg, params = trained
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["simulate", "-c", str(cfg), "--params", str(params), "-o", str(out), "--check", "-q"]) == 0
        outs.append((out / "simulate.csv").read_bytes())
    assert outs[0] == outs[1]
    assert b"# suite: " in outs[0]
    report = json.loads((tmp_path / "run0" / "simulate.json").read_text())
    assert report["check_failures"] == []


def test_bandwidth_full_map(capsys):
    assert main(["bandwidth", "--full-map", "100", "252", "64"]) == 0
    out = capsys.readouterr().out
    assert str(full_map_bytes(100, 252, 64)) in out and "22.62" in out


def test_dump_masks(trained, tmp_path):
    cfg, params = trained
    assert main(["dump-masks", "-c", str(cfg), "--params", str(params), "-o", str(tmp_path), "--scene", "1", "-q"]) == 0
    files = sorted(p.name for p in (tmp_path / "masks_1").iterdir())
    assert "vehicle_M_re.pgm" in files and "infrastructure_M_sd.pgm" in files
    M_sd = read_pgm(tmp_path / "masks_1" / "vehicle_M_sd.pgm")
    M_re = read_pgm(tmp_path / "masks_1" / "vehicle_M_re.pgm")
    assert np.all(M_sd + M_re == 1)


def test_pgm_roundtrip(tmp_path):
    m = np.random.default_rng(0).integers(0, 2, (5, 7))
    write_pgm(tmp_path / "m.pgm", m)
    assert np.array_equal(read_pgm(tmp_path / "m.pgm"), m)


def test_bad_config_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("modes: {selection: nand}\n")
    assert main(["simulate", "-c", str(p)]) == 2
    assert "modes.selection" in capsys.readouterr().err


def test_set_override(trained, tmp_path):
    cfg, params = trained
    out = tmp_path / "o"
    assert main(["simulate", "-c", str(cfg), "--params", str(params), "-o", str(out), "-q",
                 "--set", "modes.collaboration=false", "--set", "modes.rfea=false"]) == 0
    assert "# modes.collaboration: false" in (out / "simulate.csv").read_text()

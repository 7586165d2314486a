import json

import numpy as np
import pytest

from revq.cli import main, read_matrix, write_matrix
from revq.spectral import read_tier_dump

CONFIG = """\
revq:
  dim: 6
  n_routed: 4
  k_active: 2
  n_shared: 1
  codebook_size: 16
  window_frames: 24
train:
  steps: 30
  batch: 4
  drps_window: 5
  seed: 7
source:
  clusters: 3
  separation: 6.0
  frames_per_utterance: 24
  utterances_per_cluster: 6
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(CONFIG)
    return str(path)


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_full_pipeline_roundtrip(config, tmp_path, capsys):
    latents = str(tmp_path / "latents.f32")
    model = str(tmp_path / "model.rvqm")
    stream = str(tmp_path / "out.rvqb")
    recon_enc = str(tmp_path / "recon_enc.f32")
    recon_dec = str(tmp_path / "recon_dec.f32")

    assert main(["synth", config, "-o", latents]) == 0
    assert main(["train", config, "-o", model]) == 0
    code, out, err = run(["encode", model, latents, "-o", stream,
                          "--recon-out", recon_enc, "--json"], capsys)
    assert code == 0
    report = json.loads(out)
    assert report["mask_bits"] == report["windows"] * 4
    assert main(["decode", model, stream, "-o", recon_dec]) == 0

    enc = read_matrix(recon_enc)
    dec = read_matrix(recon_dec)
    assert np.array_equal(enc, dec)  # decoder replays the encoder exactly
    original = read_matrix(latents)
    assert dec.shape == original.shape


def test_encode_reports_two_second_overhead_example(config, tmp_path, capsys):
    # one whole-utterance window over a 2-second-equivalent input with an
    # 8-wide routed pool reports 4 bps of mask overhead
    cfg2 = tmp_path / "cfg2.yaml"
    cfg2.write_text(CONFIG.replace("n_routed: 4", "n_routed: 8")
                          .replace("window_frames: 24", "window_frames: 0"))
    latents, model, stream = (str(tmp_path / n) for n in ("l.f32", "m.rvqm", "s.rvqb"))
    assert main(["synth", str(cfg2), "-o", latents]) == 0
    assert main(["train", str(cfg2), "-o", model]) == 0
    frames = read_matrix(latents).shape[1]
    code, out, _ = run(["encode", model, latents, "-o", stream, "--json",
                        "--frame-rate", str(frames / 2.0)], capsys)
    assert code == 0
    report = json.loads(out)
    assert report["windows"] == 1
    assert report["duration_s"] == pytest.approx(2.0)
    assert report["overhead_bps"] == pytest.approx(4.0)


def test_config_error_exit_codes(config, tmp_path, capsys):
    model = str(tmp_path / "model.rvqm")
    code, _, err = run(["train", config, "-o", model,
                        "--set", "revq.k_active=9"], capsys)
    assert code == 2
    assert "k_active" in err
    code, _, err = run(["train", config, "-o", model,
                        "--set", "revq.bogus_key=1"], capsys)
    assert code == 2
    assert "bogus_key" in err

    bad = tmp_path / "bad.yaml"
    bad.write_text("revq:\n  dim: 6\n  n_routed: 4\n  k_active: 2\nmystery:\n  x: 1\n")
    code, _, err = run(["train", str(bad), "-o", model], capsys)
    assert code == 2
    assert "mystery" in err


def test_data_error_exit_code(config, tmp_path, capsys):
    model = str(tmp_path / "model.rvqm")
    latents = str(tmp_path / "latents.f32")
    assert main(["synth", config, "-o", latents]) == 0
    assert main(["train", config, "-o", model]) == 0
    corrupt = tmp_path / "corrupt.rvqb"
    corrupt.write_bytes(b"NOPE" + b"\x00" * 40)
    code, _, err = run(["decode", model, str(corrupt), "-o",
                        str(tmp_path / "x.f32")], capsys)
    assert code == 3

    wrong = tmp_path / "wrong.f32"
    write_matrix(str(wrong), np.zeros((3, 10)))
    code, _, err = run(["encode", model, str(wrong), "-o",
                        str(tmp_path / "y.rvqb")], capsys)
    assert code == 3
    assert "dimension" in err


def test_numeric_abort_exit_code(config, tmp_path, capsys):
    code, _, err = run(["train", config, "-o", str(tmp_path / "m.rvqm"),
                        "--set", "train.commitment_weight=.inf"], capsys)
    assert code == 4
    assert "non-finite" in err


def test_seeded_commands_are_byte_identical(config, tmp_path):
    files = {}
    for tag in ("a", "b"):
        latents = tmp_path / f"latents_{tag}.f32"
        model = tmp_path / f"model_{tag}.rvqm"
        log = tmp_path / f"log_{tag}.csv"
        stream = tmp_path / f"stream_{tag}.rvqb"
        assert main(["synth", config, "-o", str(latents)]) == 0
        assert main(["train", config, "-o", str(model), "--log", str(log)]) == 0
        assert main(["encode", str(model), str(latents), "-o", str(stream)]) == 0
        files[tag] = tuple(p.read_bytes() for p in (latents, model, log, stream))
    assert files["a"] == files["b"]


def test_train_seed_flag_changes_output(config, tmp_path):
    a, b = tmp_path / "a.rvqm", tmp_path / "b.rvqm"
    assert main(["train", config, "-o", str(a), "--seed", "1"]) == 0
    assert main(["train", config, "-o", str(b), "--seed", "2"]) == 0
    assert a.read_bytes() != b.read_bytes()


def test_inspect_model_and_stream(config, tmp_path, capsys):
    latents = str(tmp_path / "latents.f32")
    model = str(tmp_path / "model.rvqm")
    stream = str(tmp_path / "out.rvqb")
    assert main(["synth", config, "-o", latents]) == 0
    assert main(["train", config, "-o", model]) == 0
    assert main(["encode", model, latents, "-o", stream]) == 0

    code, out, _ = run(["inspect", model, "--json"], capsys)
    assert code == 0
    info = json.loads(out)
    assert info["kind"] == "model"
    assert info["n_routed"] == 4 and info["codebook_size"] == 16

    code, out, _ = run(["inspect", stream, "--json"], capsys)
    info = json.loads(out)
    assert info["kind"] == "bitstream"
    assert info["windows"] >= 1

    code, _, _ = run(["inspect", latents], capsys)
    assert code == 3  # raw matrix files carry no magic


def test_sweep_usage_and_gamma_csvs(config, tmp_path, capsys):
    out_dir = tmp_path / "sweeps"
    code, _, _ = run(["sweep", "usage", config, "-o", str(out_dir),
                      "--set", "sweep.n_routed_values=[2, 4, 8]",
                      "--set", "train.steps=10"], capsys)
    assert code == 0
    usage = (out_dir / "usage.csv").read_text().strip().split("\n")
    assert len(usage) == 4  # header + one row per pool size

    code, _, _ = run(["sweep", "gamma", config, "-o", str(out_dir),
                      "--set", "sweep.gammas=[0, 0.1, 0.01, 0.001]",
                      "--set", "train.steps=10"], capsys)
    assert code == 0
    gamma = (out_dir / "gamma.csv").read_text().strip().split("\n")
    assert len(gamma) == 5
    assert gamma[1].startswith("0,")

    code, _, _ = run(["sweep", "fixed-vs-adaptive", config, "-o", str(out_dir),
                      "--set", "train.steps=10"], capsys)
    assert code == 0
    assert (out_dir / "comparison.csv").exists()
    assert (out_dir / "window_errors.csv").exists()


def test_sweep_rerun_identical(config, tmp_path, capsys):
    outs = []
    for tag in ("a", "b"):
        out_dir = tmp_path / tag
        code, _, _ = run(["sweep", "gamma", config, "-o", str(out_dir),
                          "--set", "sweep.gammas=[0.01]",
                          "--set", "train.steps=8"], capsys)
        assert code == 0
        outs.append((out_dir / "gamma.csv").read_bytes())
    assert outs[0] == outs[1]


def test_spectrum_command(tmp_path, capsys):
    signal = tmp_path / "sig.f32"
    n = np.arange(4096)
    write_matrix(str(signal), np.sin(2 * np.pi * 37 * n / 512)[None, :])
    out = tmp_path / "tiers.bin"
    code, _, _ = run(["spectrum", str(signal), "-o", str(out)], capsys)
    assert code == 0
    with open(out, "rb") as fh:
        tiers = read_tier_dump(fh)
    assert len(tiers) == 2
    assert tiers[0].shape[0] == 128

    bad = tmp_path / "bad.f32"
    write_matrix(str(bad), np.zeros((2, 10)))
    code, _, _ = run(["spectrum", str(bad), "-o", str(out)], capsys)
    assert code == 3

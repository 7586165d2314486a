"""Command-line surface: synth, train, encode, decode, sweep, inspect, spectrum.

Configuration lives in a sectioned YAML file; ``--set section.key=value``
flags override file values and unknown keys are rejected by name. Human
reports go to stderr, machine-readable output to stdout behind ``--json``.
Exit codes: 0 success, 2 config error, 3 data-format error, 4 numerical
abort.
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
from dataclasses import fields, replace

import numpy as np
import yaml

from . import experiments
from .bitstream import STREAM_MAGIC, code_bits, overhead_bps, pack, unpack
from .errors import ConfigError, DataFormatError, NumericsError
from .modelfile import MODEL_MAGIC, load_model, save_model
from .pipeline import RevqConfig, revq_decode, revq_encode, split_windows
from .spectral import TierSpec, stft, write_tier_dump
from .trainer import SyntheticLatentSource, TrainConfig, train_run, write_training_log

_SOURCE_DEFAULTS = {
    "clusters": 4,
    "separation": 6.0,
    "spread": 0.5,
    "frames_per_utterance": 24,
    "utterances_per_cluster": 16,
    "seed": 0,
}
_SWEEP_DEFAULTS = {
    "n_routed_values": [4, 8, 16],
    "gammas": [0.0, 0.1, 0.01, 0.001],
    "drps": False,
}
_SPECTRUM_DEFAULTS = {"fft_bins": 256, "period": 2, "hop": 0}

_SCHEMA = {
    "revq": {f.name for f in fields(RevqConfig)},
    "train": {f.name for f in fields(TrainConfig)},
    "source": set(_SOURCE_DEFAULTS),
    "sweep": set(_SWEEP_DEFAULTS),
    "spectrum": set(_SPECTRUM_DEFAULTS),
}


def load_config(path, overrides=()):
    """Read the YAML config, apply ``section.key=value`` overrides, and
    reject any key outside the documented schema."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping of sections")
    for section, content in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(content, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        for key in content:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key!r}")
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key!r}")
        raw.setdefault(section, {})[key] = yaml.safe_load(value)
    return raw


def _build_revq(raw) -> RevqConfig:
    section = dict(raw.get("revq", {}))
    for required in ("dim", "n_routed", "k_active"):
        if required not in section:
            raise ConfigError(f"config needs revq.{required}")
    return RevqConfig(**section)


def _build_train(raw) -> TrainConfig:
    return TrainConfig(**raw.get("train", {}))


def _build_source(raw, dim: int) -> SyntheticLatentSource:
    section = {**_SOURCE_DEFAULTS, **raw.get("source", {})}
    return SyntheticLatentSource.separated(
        n_clusters=section["clusters"], dim=dim,
        separation=section["separation"], spread=section["spread"],
        frames_per_utterance=section["frames_per_utterance"],
        utterances_per_cluster=section["utterances_per_cluster"],
        seed=section["seed"],
    )


# ---------------------------------------------------------------------------
# latent matrix files: u32 rows (D), u32 cols (T), float32 row-major


def write_matrix(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.astype("<f4").tobytes())


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise DataFormatError(f"{path}: truncated matrix header")
        rows, cols = struct.unpack("<II", header)
        raw = fh.read(4 * rows * cols)
        if len(raw) != 4 * rows * cols:
            raise DataFormatError(f"{path}: truncated matrix payload")
    return np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float64)


def _report(args, human: str, payload: dict) -> None:
    print(human, file=sys.stderr)
    if args.json:
        print(json.dumps(payload, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    raw = load_config(args.config, args.set)
    cfg = _build_revq(raw)
    tcfg = _build_train(raw)
    source = _build_source(raw, cfg.dim)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 0x511F]))
    latents, labels = source.sample(rng)
    Z = np.concatenate(latents, axis=1)
    write_matrix(args.out, Z)
    _report(args, f"wrote {Z.shape[0]}x{Z.shape[1]} latents "
                  f"({len(latents)} utterances, {source.n_clusters} clusters) to {args.out}",
            {"dim": Z.shape[0], "frames": int(Z.shape[1]),
             "utterances": len(labels), "clusters": source.n_clusters})
    return 0


def cmd_train(args) -> int:
    raw = load_config(args.config, args.set)
    cfg = _build_revq(raw)
    tcfg = _build_train(raw)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    source = _build_source(raw, cfg.dim)
    result = train_run(source, cfg, tcfg, mode=args.mode)
    save_model(args.out, cfg, result.bank, result.weights, result.state.bias)
    log_path = args.log if args.log else args.out + ".log.csv"
    with open(log_path, "w") as fh:
        write_training_log(fh, result.log)
    final = result.log[-1]
    _report(args, f"trained {tcfg.steps} steps (mode={args.mode}), "
                  f"final loss {final.loss:.6g}; model -> {args.out}, log -> {log_path}",
            {"steps": tcfg.steps, "mode": args.mode,
             "final_loss_recon": final.loss_recon,
             "final_loss_commit": final.loss_commit,
             "model": args.out, "log": log_path})
    return 0


def cmd_encode(args) -> int:
    cfg, bank, weights, state = load_model(args.model)
    Z = read_matrix(args.latents)
    if Z.shape[0] != cfg.dim:
        raise DataFormatError(
            f"latents have dimension {Z.shape[0]}, model expects {cfg.dim}")
    windows = split_windows(Z, cfg.window_frames)
    encoded = []
    recon_parts = []
    for window in windows:
        enc, recon = revq_encode(window, bank, weights, state, training=False)
        encoded.append(enc)
        recon_parts.append(recon)
    stream = pack(encoded, cfg)
    with open(args.out, "wb") as fh:
        fh.write(stream)
    if args.recon_out:
        write_matrix(args.recon_out, np.concatenate(recon_parts, axis=1))

    mask_bits = len(windows) * cfg.n_routed
    bits_per_code = code_bits(cfg.codebook_size)
    total_code_bits = sum(
        (cfg.n_shared + cfg.k_active) * w.frames * bits_per_code for w in windows)
    duration = Z.shape[1] / args.frame_rate
    bps = overhead_bps(len(windows), cfg.n_routed, duration)
    _report(args, f"encoded {len(windows)} windows: {total_code_bits} code bits, "
                  f"{mask_bits} mask bits, mask overhead {bps:.6g} bps "
                  f"at {args.frame_rate:.6g} frames/s ({duration:.6g} s)",
            {"windows": len(windows), "code_bits": total_code_bits,
             "mask_bits": mask_bits, "overhead_bps": bps,
             "duration_s": duration, "stream_bytes": len(stream)})
    return 0


def cmd_decode(args) -> int:
    model_cfg, bank, _, _ = load_model(args.model)
    with open(args.stream, "rb") as fh:
        cfg, windows = unpack(fh.read())
    if cfg != model_cfg:
        raise DataFormatError("stream config echo does not match the model")
    recon = np.concatenate([revq_decode(w, bank) for w in windows], axis=1)
    write_matrix(args.out, recon)
    _report(args, f"decoded {len(windows)} windows "
                  f"({recon.shape[0]}x{recon.shape[1]}) to {args.out}",
            {"windows": len(windows), "dim": recon.shape[0],
             "frames": int(recon.shape[1])})
    return 0


def cmd_inspect(args) -> int:
    with open(args.path, "rb") as fh:
        magic = fh.read(4)
    if magic == MODEL_MAGIC:
        cfg, bank, weights, state = load_model(args.path)
        payload = {
            "kind": "model", "dim": cfg.dim, "n_routed": cfg.n_routed,
            "k_active": cfg.k_active, "n_shared": cfg.n_shared,
            "codebook_size": cfg.codebook_size, "window_frames": cfg.window_frames,
            "normalized": bank.normalized,
            "bias": [float(b) for b in state.bias],
        }
    elif magic == STREAM_MAGIC:
        with open(args.path, "rb") as fh:
            cfg, windows = unpack(fh.read())
        payload = {
            "kind": "bitstream", "dim": cfg.dim, "n_routed": cfg.n_routed,
            "k_active": cfg.k_active, "n_shared": cfg.n_shared,
            "codebook_size": cfg.codebook_size, "window_frames": cfg.window_frames,
            "windows": len(windows),
            "frames": int(sum(w.frames for w in windows)),
        }
    else:
        raise DataFormatError(f"{args.path}: unrecognized magic {magic!r}")
    human = ", ".join(f"{k}={v}" for k, v in payload.items() if k != "bias")
    _report(args, human, payload)
    return 0


def cmd_sweep(args) -> int:
    raw = load_config(args.config, args.set)
    cfg = _build_revq(raw)
    tcfg = _build_train(raw)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    source = _build_source(raw, cfg.dim)
    sweep_cfg = {**_SWEEP_DEFAULTS, **raw.get("sweep", {})}
    os.makedirs(args.out_dir, exist_ok=True)

    if args.kind == "usage":
        rows = experiments.usage_sweep(sweep_cfg["n_routed_values"], sweep_cfg["drps"],
                                       tcfg.gamma, source, cfg, tcfg)
        out = os.path.join(args.out_dir, "usage.csv")
        with open(out, "w") as fh:
            experiments.write_usage_csv(fh, rows, sweep_cfg["drps"], tcfg.gamma)
        written = [out]
    elif args.kind == "gamma":
        rows = experiments.gamma_sweep(sweep_cfg["gammas"], source, cfg, tcfg)
        out = os.path.join(args.out_dir, "gamma.csv")
        with open(out, "w") as fh:
            experiments.write_gamma_csv(fh, rows)
        written = [out]
    else:  # fixed-vs-adaptive
        cfg_fixed = replace(cfg, n_routed=cfg.k_active)
        record = experiments.fixed_vs_adaptive(source, cfg_fixed, cfg, tcfg)
        summary = os.path.join(args.out_dir, "comparison.csv")
        with open(summary, "w") as fh:
            experiments.write_comparison_csv(fh, record)
        per_window = os.path.join(args.out_dir, "window_errors.csv")
        with open(per_window, "w") as fh:
            experiments.write_window_errors_csv(fh, record)
        written = [summary, per_window]
    _report(args, f"sweep {args.kind} wrote {', '.join(written)}",
            {"kind": args.kind, "files": written})
    return 0


def cmd_spectrum(args) -> int:
    raw = load_config(args.config, args.set) if args.config else {}
    section = {**_SPECTRUM_DEFAULTS, **raw.get("spectrum", {})}
    spec = TierSpec(section["fft_bins"], section["period"])
    hop = section["hop"] or spec.fft_size // 4
    signal = read_matrix(args.signal)
    if signal.shape[0] != 1:
        raise DataFormatError("signal file must be a 1-row matrix of samples")
    sp = stft(signal[0], spec.fft_size, hop)
    plane = sp.magnitude if args.plane == "magnitude" else sp.phase
    with open(args.out, "wb") as fh:
        write_tier_dump(fh, plane, spec.period)
    _report(args, f"wrote {spec.period} tiers of {spec.tier_len}x{sp.frames} "
                  f"({args.plane}) to {args.out}",
            {"fft_bins": spec.fft_bins, "period": spec.period,
             "frames": sp.frames, "plane": args.plane, "out": args.out})
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="revq",
        description="Residual-experts vector quantization codec tools")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        if config_required:
            p.add_argument("config", help="YAML config file")
        p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                       help="override a config value")
        p.add_argument("--json", action="store_true",
                       help="machine-readable report on stdout")

    p = sub.add_parser("synth", help="generate synthetic latents")
    common(p)
    p.add_argument("-o", "--out", required=True, help="output latents file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on synthetic latents")
    common(p)
    p.add_argument("-o", "--out", required=True, help="output model file")
    p.add_argument("--log", help="training log CSV (default: <model>.log.csv)")
    p.add_argument("--mode", choices=["revq", "fixed_rvq"], default="revq")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a latents file into a bitstream")
    p.add_argument("model")
    p.add_argument("latents")
    p.add_argument("-o", "--out", required=True, help="output .rvqb stream")
    p.add_argument("--frame-rate", type=float, default=50.0,
                   help="latent frames per second, for the bps report")
    p.add_argument("--recon-out", help="also write the encoder-side reconstruction")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a bitstream back into latents")
    p.add_argument("model")
    p.add_argument("stream")
    p.add_argument("-o", "--out", required=True, help="output latents file")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("inspect", help="dump a model or bitstream header")
    p.add_argument("path")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("sweep", help="run an experiment sweep, writing CSVs")
    p.add_argument("kind", choices=["usage", "gamma", "fixed-vs-adaptive"])
    common(p)
    p.add_argument("-o", "--out-dir", required=True)
    p.add_argument("--seed", type=int, help="override train.seed")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("spectrum", help="dump tiered STFT planes of a signal")
    p.add_argument("signal", help="1-row matrix file of samples")
    p.add_argument("--config", help="YAML config with a spectrum section")
    p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL")
    p.add_argument("--plane", choices=["magnitude", "phase"], default="magnitude")
    p.add_argument("--json", action="store_true")
    p.add_argument("-o", "--out", required=True, help="output tier dump")
    p.set_defaults(func=cmd_spectrum)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

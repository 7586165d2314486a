"""Single-file model container: config echo, codebooks, then the gate.

Layout (little-endian):

    magic "RVQM" | u16 version | u8 flags (bit 0: normalized lookup) | u8 0
    | u32 dim | u32 n_routed | u32 k_active | u32 n_shared
    | u32 codebook_size | u32 window_frames
    | (n_shared + n_routed) codebook blocks (shared first, routed ascending)
    | gate block: u32 n_routed, u32 k_active, W (dim x n_routed f32), bias f32
"""

from __future__ import annotations

import struct

from .errors import DataFormatError
from .pipeline import RevqConfig
from .quant import QuantizerBank, read_codebook, write_codebook
from .router import GateState, GateWeights, read_gate, write_gate

MODEL_MAGIC = b"RVQM"
MODEL_VERSION = 1
_CFG = struct.Struct("<III III")


def save_model(path, cfg: RevqConfig, bank: QuantizerBank, weights: GateWeights,
               bias) -> None:
    if bank.n_shared != cfg.n_shared or bank.n_routed != cfg.n_routed:
        raise ValueError("bank structure does not match the config")
    if weights.n_routed != cfg.n_routed or weights.k_active != cfg.k_active:
        raise ValueError("gate structure does not match the config")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<HBB", MODEL_VERSION, 1 if bank.normalized else 0, 0))
        fh.write(_CFG.pack(cfg.dim, cfg.n_routed, cfg.k_active,
                           cfg.n_shared, cfg.codebook_size, cfg.window_frames))
        for cb in list(bank.shared) + list(bank.routed):
            write_codebook(fh, cb)
        write_gate(fh, weights, bias)


def load_model(path):
    """Returns ``(cfg, bank, weights, state)`` with the stored bias frozen
    into a fresh gate state."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MODEL_MAGIC:
            raise DataFormatError(f"bad model magic {magic!r}")
        header = fh.read(4)
        if len(header) != 4:
            raise DataFormatError("truncated model header")
        version, flags, _ = struct.unpack("<HBB", header)
        if version != MODEL_VERSION:
            raise DataFormatError(f"unsupported model version {version}")
        raw_cfg = fh.read(_CFG.size)
        if len(raw_cfg) != _CFG.size:
            raise DataFormatError("truncated model config")
        dim, n_routed, k_active, n_shared, size, window_frames = _CFG.unpack(raw_cfg)
        cfg = RevqConfig(dim=dim, n_routed=n_routed, k_active=k_active,
                         n_shared=n_shared, codebook_size=size,
                         window_frames=window_frames)
        codebooks = [read_codebook(fh) for _ in range(n_shared + n_routed)]
        for cb in codebooks:
            if cb.dim != dim or cb.size != size:
                raise DataFormatError("codebook block disagrees with the model config")
        bank = QuantizerBank(codebooks[:n_shared], codebooks[n_shared:],
                             normalized=bool(flags & 1))
        weights, bias = read_gate(fh, dim)
        if weights.n_routed != n_routed or weights.k_active != k_active:
            raise DataFormatError("gate block disagrees with the model config")
    state = GateState(bias)
    return cfg, bank, weights, state

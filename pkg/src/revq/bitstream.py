"""Bit-exact container for encoded windows (the ".rvqb" wire format).

Layout, little-endian multi-byte integers, MSB-first bit packing:

    magic "RVQB" | u16 version | u32 dim | u32 n_routed | u32 k_active
    | u32 n_shared | u32 codebook_size | u32 window_frames
    then per window:
    u32 T | mask (n_routed bits, quantizer 0 first) |
    (n_shared + k_active) * T code indices, row-major (stage-major, time
    within stage), ceil(log2 C) bits each | zero padding to byte boundary

Each window is byte-aligned so streams can be resynchronized cheaply; the
config echo makes the stream self-describing. The per-window mask is the
only routing side information, n_routed bits per window. Pure functions,
fixed endianness and bit order on every platform.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataFormatError, IntegrityError, TruncationError
from .pipeline import EncodedWindow, RevqConfig

STREAM_MAGIC = b"RVQB"
STREAM_VERSION = 1
_HEADER = struct.Struct("<III III")


def code_bits(codebook_size: int) -> int:
    """Bits per transmitted index; the size must be a power of two >= 2."""
    if codebook_size < 2 or codebook_size & (codebook_size - 1):
        raise ValueError(f"codebook_size must be a power of two >= 2, got {codebook_size}")
    return codebook_size.bit_length() - 1


def _window_payload(window: EncodedWindow, cfg: RevqConfig, nbits: int) -> bytes:
    if window.mask.shape[0] != cfg.n_routed:
        raise IntegrityError(
            f"mask has {window.mask.shape[0]} bits, config says {cfg.n_routed}"
        )
    if int(window.mask.sum()) != cfg.k_active:
        raise IntegrityError(
            f"mask popcount {int(window.mask.sum())} != k_active {cfg.k_active}"
        )
    if window.shared_codes.shape[0] != cfg.n_shared:
        raise IntegrityError("shared code rows do not match the config")
    codes = np.concatenate([window.shared_codes, window.routed_codes], axis=0)
    if codes.size and (codes.min() < 0 or codes.max() >= cfg.codebook_size):
        raise IntegrityError(f"code index out of range [0, {cfg.codebook_size})")
    # expand each index into nbits MSB-first bits; packbits zero-pads the tail
    shifts = np.arange(nbits - 1, -1, -1)
    codebits = (codes.ravel()[:, None] >> shifts) & 1
    bits = np.concatenate([window.mask.astype(np.uint8), codebits.ravel().astype(np.uint8)])
    return np.packbits(bits).tobytes()


def pack(windows, cfg: RevqConfig) -> bytes:
    """Serialize encoded windows into a deterministic byte stream."""
    nbits = code_bits(cfg.codebook_size)
    out = bytearray()
    out += STREAM_MAGIC
    out += struct.pack("<H", STREAM_VERSION)
    out += _HEADER.pack(cfg.dim, cfg.n_routed, cfg.k_active,
                        cfg.n_shared, cfg.codebook_size, cfg.window_frames)
    for window in windows:
        out += struct.pack("<I", window.frames)
        out += _window_payload(window, cfg, nbits)
    return bytes(out)


def unpack(data: bytes):
    """Exact inverse of :func:`pack`; returns ``(cfg, windows)``.

    Distinct failures raise distinct errors: bad magic/version is a
    DataFormatError, a stream ending inside window k is a TruncationError
    carrying k, and a mask whose popcount disagrees with the header is an
    IntegrityError.
    """
    if data[:4] != STREAM_MAGIC:
        raise DataFormatError(f"bad stream magic {data[:4]!r}")
    if len(data) < 4 + 2 + _HEADER.size:
        raise DataFormatError("truncated stream header")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != STREAM_VERSION:
        raise DataFormatError(f"unsupported stream version {version}")
    dim, n_routed, k_active, n_shared, size, window_frames = _HEADER.unpack_from(data, 6)
    cfg = RevqConfig(dim=dim, n_routed=n_routed, k_active=k_active, n_shared=n_shared,
                     codebook_size=size, window_frames=window_frames)
    nbits = code_bits(size)
    shifts = np.arange(nbits - 1, -1, -1)

    windows = []
    offset = 6 + _HEADER.size
    index = 0
    while offset < len(data):
        if offset + 4 > len(data):
            raise TruncationError(f"stream truncated in header of window {index}", index)
        (frames,) = struct.unpack_from("<I", data, offset)
        offset += 4
        n_codes = (n_shared + k_active) * frames
        bits_needed = n_routed + n_codes * nbits
        payload_len = (bits_needed + 7) // 8
        if offset + payload_len > len(data):
            raise TruncationError(f"stream truncated in payload of window {index}", index)
        bits = np.unpackbits(np.frombuffer(data, np.uint8, payload_len, offset))
        mask = bits[:n_routed]
        if int(mask.sum()) != k_active:
            raise IntegrityError(
                f"window {index}: mask popcount {int(mask.sum())} != k_active {k_active}"
            )
        codebits = bits[n_routed:n_routed + n_codes * nbits].reshape(n_codes, nbits)
        codes = (codebits.astype(np.int64) << shifts).sum(axis=1)
        codes = codes.reshape(n_shared + k_active, frames)
        windows.append(EncodedWindow(mask, codes[:n_shared], codes[n_shared:]))
        offset += payload_len
        index += 1
    return cfg, windows


def payload_bits(cfg: RevqConfig, frames: int) -> int:
    """Unpadded payload size of one window in bits."""
    return cfg.n_routed + (cfg.n_shared + cfg.k_active) * frames * code_bits(cfg.codebook_size)


def overhead_bps(n_windows: int, n_routed: int, duration_s: float) -> float:
    """Extra bandwidth spent on routing masks: one n_routed-bit mask per window."""
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    if n_windows < 0:
        raise ValueError("window count must be nonnegative")
    return n_windows * n_routed / duration_s

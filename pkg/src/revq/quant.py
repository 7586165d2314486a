"""Codebooks, nearest-neighbor search, and residual quantizer chains.

A codebook is a table of C entries in a D-dimensional latent space plus
EMA accumulators used during training. Lookup defaults to plain squared
L2 distance on raw vectors; ``normalized=True`` switches to searching in
L2-normalized space (entries and query normalized before the distance,
returned entries stay raw).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError

CODEBOOK_MAGIC = b"RVQC"
CODEBOOK_VERSION = 1

_NORM_EPS = 1e-12


@dataclass
class QuantCode:
    """One transmitted code: entry index plus squared L2 distance at selection."""

    index: int
    distance: float


@dataclass
class Codebook:
    """Entry table (C x D) with per-entry EMA usage statistics.

    ``ema_counts[i]`` accumulates the (decayed) number of vectors assigned
    to entry i; ``ema_sums[i]`` the matching vector sum. Both live next to
    the entries so training and inference share one object.
    """

    entries: np.ndarray
    ema_counts: np.ndarray = field(default=None)  # type: ignore[assignment]
    ema_sums: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[0] < 1 or self.entries.shape[1] < 1:
            raise ValueError("codebook entries must be a (C, D) matrix with C, D >= 1")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("codebook entries must be finite")
        if self.ema_counts is None:
            self.ema_counts = np.ones(self.size, dtype=np.float64)
        else:
            self.ema_counts = np.asarray(self.ema_counts, dtype=np.float64)
        if self.ema_sums is None:
            self.ema_sums = self.entries.copy()
        else:
            self.ema_sums = np.asarray(self.ema_sums, dtype=np.float64)
        if self.ema_counts.shape != (self.size,):
            raise ValueError("ema_counts must have one slot per entry")
        if self.ema_sums.shape != self.entries.shape:
            raise ValueError("ema_sums must match entry shape")
        if np.any(self.ema_counts < 0):
            raise ValueError("ema_counts must be nonnegative")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(self.entries.copy(), self.ema_counts.copy(), self.ema_sums.copy())


def _search_space(vectors: np.ndarray, normalized: bool) -> np.ndarray:
    if not normalized:
        return vectors
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    return vectors / np.maximum(norms, _NORM_EPS)


def quantize_nearest(v, cb: Codebook, normalized: bool = False):
    """Quantize one vector against a codebook.

    Returns ``(code, quantized, residual)`` where ``code.index`` minimizes
    squared L2 distance over all entries (ties broken by lowest index),
    ``quantized`` is the selected raw entry and ``residual = v - quantized``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (cb.dim,):
        raise ValueError(f"input has shape {v.shape}, codebook dimension is {cb.dim}")
    if not np.all(np.isfinite(v)):
        raise ValueError("input vector must be finite")
    query = _search_space(v, normalized)
    table = _search_space(cb.entries, normalized)
    dists = np.sum((table - query) ** 2, axis=1)
    idx = int(np.argmin(dists))  # argmin takes the lowest index on ties
    quantized = cb.entries[idx].copy()
    return QuantCode(idx, float(dists[idx])), quantized, v - quantized


def quantize_frames(frames: np.ndarray, cb: Codebook, normalized: bool = False):
    """Row-wise nearest-neighbor quantization of an (n, D) matrix.

    Vectorized equivalent of calling :func:`quantize_nearest` per row;
    returns ``(indices, quantized, residuals)``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != cb.dim:
        raise ValueError(f"frames must be (n, {cb.dim}), got {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise ValueError("frames must be finite")
    query = _search_space(frames, normalized)
    table = _search_space(cb.entries, normalized)
    dists = np.sum((query[:, None, :] - table[None, :, :]) ** 2, axis=2)
    indices = np.argmin(dists, axis=1)
    quantized = cb.entries[indices]
    return indices.astype(np.int64), quantized, frames - quantized


def rvq_chain(v, codebooks, normalized: bool = False):
    """Residual quantization through an ordered list of codebooks.

    Stage k quantizes the residual left by stage k-1; the reconstruction is
    the sum of all selected entries and ``final_residual = v - reconstruction``.
    """
    if len(codebooks) == 0:
        raise ValueError("rvq_chain needs at least one codebook")
    v = np.asarray(v, dtype=np.float64)
    dims = {cb.dim for cb in codebooks}
    if len(dims) != 1:
        raise ValueError("all codebooks in a chain must share one dimension")
    codes = []
    residual = v
    reconstruction = np.zeros_like(v)
    for cb in codebooks:
        code, quantized, residual = quantize_nearest(residual, cb, normalized)
        codes.append(code)
        reconstruction = reconstruction + quantized
    return codes, reconstruction, residual


@dataclass
class QuantizerBank:
    """One or more always-active shared quantizers plus a routed pool.

    Immutable at inference (safe to share across encode jobs); training
    mutates entries and accumulators in place and needs exclusive access.
    All codebooks share one dimension and one size so a single bit width
    covers every transmitted index.
    """

    shared: list
    routed: list
    normalized: bool = False

    def __post_init__(self):
        if len(self.shared) < 1:
            raise ValueError("bank needs at least one shared quantizer")
        cbs = list(self.shared) + list(self.routed)
        if len({cb.dim for cb in cbs}) != 1:
            raise ValueError("all codebooks in a bank must share one dimension")
        if len({cb.size for cb in cbs}) != 1:
            raise ValueError("all codebooks in a bank must share one size")

    @property
    def n_shared(self) -> int:
        return len(self.shared)

    @property
    def n_routed(self) -> int:
        return len(self.routed)

    @property
    def dim(self) -> int:
        return self.shared[0].dim

    @property
    def codebook_size(self) -> int:
        return self.shared[0].size

    def copy(self) -> "QuantizerBank":
        return QuantizerBank(
            [cb.copy() for cb in self.shared],
            [cb.copy() for cb in self.routed],
            self.normalized,
        )


def write_codebook(fh, cb: Codebook) -> None:
    """Serialize one codebook: magic, u32 version, u32 C, u32 D, C*D float32.

    Little-endian throughout; EMA accumulators are not serialized.
    """
    fh.write(CODEBOOK_MAGIC)
    fh.write(struct.pack("<III", CODEBOOK_VERSION, cb.size, cb.dim))
    fh.write(cb.entries.astype("<f4").tobytes())


def read_codebook(fh) -> Codebook:
    magic = fh.read(4)
    if magic != CODEBOOK_MAGIC:
        raise DataFormatError(f"bad codebook magic {magic!r}")
    header = fh.read(12)
    if len(header) != 12:
        raise DataFormatError("truncated codebook header")
    version, size, dim = struct.unpack("<III", header)
    if version != CODEBOOK_VERSION:
        raise DataFormatError(f"unsupported codebook version {version}")
    raw = fh.read(4 * size * dim)
    if len(raw) != 4 * size * dim:
        raise DataFormatError("truncated codebook entries")
    entries = np.frombuffer(raw, dtype="<f4").reshape(size, dim).astype(np.float64)
    return Codebook(entries)

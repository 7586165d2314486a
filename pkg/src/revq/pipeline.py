"""Windowed encode/decode pipeline around a quantizer bank and gate.

A window of latent frames gets one routing decision: the shared
quantizer(s) run frame-wise first, then the selected routed quantizers
consume the residual chain in ascending index order, so smaller indices
always carry the higher-energy stages. The decoder needs only the mask
and the code arrays; it never consults gate weights or scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError
from .quant import QuantizerBank, quantize_frames
from .router import GateState, GateWeights, RoutingDecision, route_window


@dataclass
class LatentWindow:
    """A contiguous latent block Z of shape (D, T) sharing one routing decision."""

    Z: np.ndarray
    window_index: int = 0

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        if self.Z.ndim != 2 or self.Z.shape[1] < 1:
            raise ValueError("window latent must be (D, T) with T >= 1")
        if not np.all(np.isfinite(self.Z)):
            raise ValueError("window latent must be finite")

    @property
    def dim(self) -> int:
        return self.Z.shape[0]

    @property
    def frames(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True)
class RevqConfig:
    """Structural configuration shared by encoder, decoder and bitstream.

    ``window_frames == 0`` routes whole utterances as single windows.
    """

    dim: int
    n_routed: int
    k_active: int
    n_shared: int = 1
    codebook_size: int = 512
    window_frames: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if self.n_shared < 1:
            raise ConfigError("n_shared must be >= 1")
        if self.n_routed < 1:
            raise ConfigError("n_routed must be >= 1")
        if not 1 <= self.k_active <= self.n_routed:
            raise ConfigError(
                f"k_active must be in [1, n_routed={self.n_routed}], got {self.k_active}"
            )
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if self.window_frames < 0:
            raise ConfigError("window_frames must be >= 0")


@dataclass
class EncodedWindow:
    """Wire content of one window: selection mask plus per-stage code rows.

    ``shared_codes`` is (n_shared, T); ``routed_codes`` is (k, T) ordered by
    ascending selected quantizer index, matching decode order.
    """

    mask: np.ndarray
    shared_codes: np.ndarray
    routed_codes: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        self.shared_codes = np.atleast_2d(np.asarray(self.shared_codes, dtype=np.int64))
        self.routed_codes = np.atleast_2d(np.asarray(self.routed_codes, dtype=np.int64))
        if int(self.mask.sum()) != self.routed_codes.shape[0]:
            raise ValueError("mask popcount must equal the routed code row count")

    @property
    def selected(self) -> tuple:
        return tuple(int(i) for i in np.flatnonzero(self.mask))

    @property
    def frames(self) -> int:
        return self.shared_codes.shape[1]


@dataclass
class WindowEncoding:
    """Full encoder-side record of one window, kept for training.

    ``shared_inputs[s]`` / ``routed_inputs[j]`` hold the (T, D) residuals fed
    to each stage; ``routed_outputs[j]`` the matching quantized outputs for
    the j-th selected quantizer (ascending index order).
    """

    encoded: EncodedWindow
    reconstruction: np.ndarray
    decision: RoutingDecision
    shared_inputs: list
    routed_inputs: list
    routed_outputs: list


def split_windows(Z: np.ndarray, window_frames: int) -> list:
    """Split (D, T_total) into contiguous non-overlapping windows.

    The last window may be shorter; 0 yields a single whole-utterance window.
    Concatenating the window contents reproduces the input exactly.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] < 1:
        raise ValueError("latent matrix must be (D, T_total) with T_total >= 1")
    if window_frames < 0:
        raise ValueError("window_frames must be >= 0")
    if window_frames == 0:
        return [LatentWindow(Z, 0)]
    return [
        LatentWindow(Z[:, start:start + window_frames], i)
        for i, start in enumerate(range(0, Z.shape[1], window_frames))
    ]


def encode_window(window: LatentWindow, bank: QuantizerBank, weights: GateWeights,
                  state: GateState = None, training: bool = False) -> WindowEncoding:
    """Encode one window, keeping every stage input/output for the trainer.

    Shared quantizers run first in order; the routing decision (computed on
    the raw window latent, not the residual) picks ``k_active`` routed
    quantizers which then extend the residual chain in ascending index order.
    """
    if window.dim != bank.dim:
        raise ValueError(f"window dimension {window.dim} != bank dimension {bank.dim}")
    if weights.n_routed != bank.n_routed:
        raise ValueError("gate weight columns must match the routed pool size")
    frames = window.Z.T  # (T, D)
    decision = route_window(frames, weights, state, training=training)

    residual = frames
    recon = np.zeros_like(frames)
    shared_codes = np.empty((bank.n_shared, window.frames), dtype=np.int64)
    shared_inputs = []
    for s, cb in enumerate(bank.shared):
        shared_inputs.append(residual)
        idx, quantized, residual = quantize_frames(residual, cb, bank.normalized)
        shared_codes[s] = idx
        recon = recon + quantized

    routed_codes = np.empty((weights.k_active, window.frames), dtype=np.int64)
    routed_inputs = []
    routed_outputs = []
    for j, qi in enumerate(decision.selected):
        routed_inputs.append(residual)
        idx, quantized, residual = quantize_frames(residual, bank.routed[qi], bank.normalized)
        routed_codes[j] = idx
        routed_outputs.append(quantized)
        recon = recon + quantized

    encoded = EncodedWindow(decision.mask.copy(), shared_codes, routed_codes)
    return WindowEncoding(encoded, recon.T, decision, shared_inputs, routed_inputs,
                          routed_outputs)


def revq_encode(window: LatentWindow, bank: QuantizerBank, weights: GateWeights,
                state: GateState = None, training: bool = False):
    """Encode one window; returns ``(EncodedWindow, reconstruction (D, T))``."""
    enc = encode_window(window, bank, weights, state, training=training)
    return enc.encoded, enc.reconstruction


def revq_decode(encoded: EncodedWindow, bank: QuantizerBank) -> np.ndarray:
    """Reconstruct a window from codes alone: shared entries plus selected
    routed entries summed in ascending index order, the exact arithmetic the
    encoder used, so the result matches the encoder-side reconstruction
    bit for bit."""
    if encoded.mask.shape[0] != bank.n_routed:
        raise ValueError("mask length does not match the routed pool")
    if encoded.shared_codes.shape[0] != bank.n_shared:
        raise ValueError("shared code rows do not match the bank")
    size = bank.codebook_size
    if encoded.shared_codes.size and not (
        encoded.shared_codes.min() >= 0 and encoded.shared_codes.max() < size
    ):
        raise ValueError("shared code index out of range")
    if encoded.routed_codes.size and not (
        encoded.routed_codes.min() >= 0 and encoded.routed_codes.max() < size
    ):
        raise ValueError("routed code index out of range")

    frames = encoded.frames
    recon = np.zeros((frames, bank.dim), dtype=np.float64)
    for s, cb in enumerate(bank.shared):
        recon = recon + cb.entries[encoded.shared_codes[s]]
    for j, qi in enumerate(encoded.selected):
        recon = recon + bank.routed[qi].entries[encoded.routed_codes[j]]
    return recon.T


def expansion_stats(cfg: RevqConfig):
    """Embedding-space expansion over a fixed chain of equal active size.

    Returns ``(space_factor, combinations)``: the ratio of available to
    active quantizers as an exact rational, and the number of selectable
    routed subsets C(n_routed, k_active).
    """
    combinations = math.comb(cfg.n_routed, cfg.k_active)
    space_factor = Fraction(cfg.n_shared + cfg.n_routed, cfg.n_shared + cfg.k_active)
    return space_factor, combinations

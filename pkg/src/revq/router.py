"""Gating network for routed quantizer selection.

Affinity scores are a time-averaged bias-free linear map of the window
latent; the top ``k_active`` biased scores pick the routed quantizers.
A gradient-free protection bias nudges rarely-used quantizers back into
the selection without forcing uniform loads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError


@dataclass
class GateWeights:
    """Bias-free routing matrix W of shape (D, n_routed) plus the active count."""

    W: np.ndarray
    k_active: int

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 2:
            raise ValueError("gate weights must be a (D, n_routed) matrix")
        if not np.all(np.isfinite(self.W)):
            raise ValueError("gate weights must be finite")
        if not 1 <= self.k_active <= self.n_routed:
            raise ValueError(f"k_active must be in [1, {self.n_routed}], got {self.k_active}")

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    @property
    def n_routed(self) -> int:
        return self.W.shape[1]


@dataclass
class GateState:
    """Mutable routing state: protection bias, load counters, window step count.

    ``load[i]`` counts selections of routed quantizer i since the last bias
    update; after every full routing step ``sum(load) == steps_in_window * k``.
    Single-writer: concurrent encoders need private states or a serialized
    accumulator.
    """

    bias: np.ndarray
    load: np.ndarray = field(default=None)  # type: ignore[assignment]
    steps_in_window: int = 0

    def __post_init__(self):
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.load is None:
            self.load = np.zeros(self.bias.shape[0], dtype=np.int64)
        else:
            self.load = np.asarray(self.load, dtype=np.int64)
        if self.bias.ndim != 1 or self.load.shape != self.bias.shape:
            raise ValueError("bias and load must be vectors of equal length")
        if np.any(self.load < 0):
            raise ValueError("load counters must be nonnegative")

    @classmethod
    def zeros(cls, n_routed: int) -> "GateState":
        return cls(np.zeros(n_routed, dtype=np.float64))

    @property
    def n_routed(self) -> int:
        return self.bias.shape[0]

    def copy(self) -> "GateState":
        return GateState(self.bias.copy(), self.load.copy(), self.steps_in_window)


@dataclass
class RoutingDecision:
    """Outcome of one window's routing.

    ``selected`` is ascending and equals the support of ``mask``; exactly
    ``k`` mask entries are 1. ``scores`` are unbiased, ``biased_scores``
    include the protection bias actually used for selection.
    """

    scores: np.ndarray
    biased_scores: np.ndarray
    mask: np.ndarray
    selected: tuple


def compute_affinity(frames: np.ndarray, weights: GateWeights) -> np.ndarray:
    """Affinity scores: the time mean of per-frame score rows ``frames @ W``.

    ``frames`` is the transposed window latent, shape (T, D) with T >= 1.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError("frames must be a (T, D) matrix with T >= 1")
    if frames.shape[1] != weights.dim:
        raise ValueError(f"frame dimension {frames.shape[1]} != gate dimension {weights.dim}")
    return (frames @ weights.W).mean(axis=0)


def topk_mask(biased_scores: np.ndarray, k: int, scores: np.ndarray = None) -> RoutingDecision:
    """Select the k largest biased scores; ties go to the lower index.

    ``scores`` optionally carries the unbiased scores into the decision
    (defaults to the biased ones).
    """
    biased_scores = np.asarray(biased_scores, dtype=np.float64)
    n = biased_scores.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    # stable sort on the negated scores: descending value, ascending index on ties
    order = np.argsort(-biased_scores, kind="stable")
    selected = tuple(sorted(int(i) for i in order[:k]))
    mask = np.zeros(n, dtype=np.uint8)
    mask[list(selected)] = 1
    if scores is None:
        scores = biased_scores
    return RoutingDecision(np.asarray(scores, dtype=np.float64), biased_scores, mask, selected)


def ste_mask(scores: np.ndarray, hard_mask: np.ndarray) -> np.ndarray:
    """Straight-through mask: forward value is the hard mask exactly.

    Gradient contract: any downstream gradient with respect to the returned
    vector passes to ``scores`` unchanged (the ``hard_mask - scores`` term is
    stop-gradient). The analytic backward in the trainer and the frozen-mask
    surrogate used for finite differencing both implement this identity
    Jacobian; this function only realizes the forward value.
    """
    scores = np.asarray(scores, dtype=np.float64)
    hard_mask = np.asarray(hard_mask)
    if scores.shape != hard_mask.shape:
        raise ValueError("scores and hard mask must have equal shape")
    return hard_mask.astype(np.float64)


def drps_update(state: GateState, gamma: float, dead_threshold: float) -> GateState:
    """Protection-bias update, run once per accumulation window.

    Per quantizer: load below the dead threshold adds gamma to its bias;
    load above the mean load resets its bias to zero; anything in between
    keeps its bias. Loads (and the step count) reset afterwards. The dead
    branch wins when both conditions hold. The bias never enters any
    gradient computation.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    load = state.load.astype(np.float64)
    mean_load = load.mean()
    bias = state.bias.copy()
    for i in range(state.n_routed):
        if load[i] < dead_threshold:
            bias[i] += gamma
        elif load[i] > mean_load:
            bias[i] = 0.0
    return GateState(bias, np.zeros_like(state.load), 0)


def route_window(frames: np.ndarray, weights: GateWeights, state: GateState = None,
                 training: bool = False) -> RoutingDecision:
    """Route one window: affinity, bias, top-k selection, load accounting.

    Selection always uses biased scores; the decision carries the unbiased
    scores for the straight-through gradient path. When ``training`` is
    true the state's load counters are incremented at the selected indices;
    at inference the state is read-only (bias frozen but still applied).
    """
    scores = compute_affinity(frames, weights)
    bias = state.bias if state is not None else np.zeros(weights.n_routed)
    if bias.shape[0] != weights.n_routed:
        raise ValueError("gate state size does not match weight columns")
    decision = topk_mask(scores + bias, weights.k_active, scores=scores)
    if training and state is not None:
        state.load[list(decision.selected)] += 1
        state.steps_in_window += 1
    return decision


def write_gate(fh, weights: GateWeights, bias: np.ndarray) -> None:
    """Gate block appended to a model file: u32 n_routed, u32 k, W, bias (float32)."""
    fh.write(struct.pack("<II", weights.n_routed, weights.k_active))
    fh.write(weights.W.astype("<f4").tobytes())
    fh.write(np.asarray(bias, dtype="<f4").tobytes())


def read_gate(fh, dim: int):
    header = fh.read(8)
    if len(header) != 8:
        raise DataFormatError("truncated gate header")
    n_routed, k_active = struct.unpack("<II", header)
    raw_w = fh.read(4 * dim * n_routed)
    raw_b = fh.read(4 * n_routed)
    if len(raw_w) != 4 * dim * n_routed or len(raw_b) != 4 * n_routed:
        raise DataFormatError("truncated gate parameters")
    W = np.frombuffer(raw_w, dtype="<f4").reshape(dim, n_routed).astype(np.float64)
    bias = np.frombuffer(raw_b, dtype="<f4").astype(np.float64)
    return GateWeights(W, k_active), bias

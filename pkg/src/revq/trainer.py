"""Desk-scale training of codebooks and gate weights on synthetic latents.

Codebooks learn by EMA vector-quantization updates; the gate matrix W is
the only gradient-trained parameter. The straight-through mask makes the
loss differentiable in W: the forward pass uses the hard selection, the
backward pass treats the mask as the unbiased affinity scores plus a
constant. ``frozen_batch_loss`` evaluates exactly that linearization, so
central finite differences on it must agree with ``batch_loss_and_grad``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericsError
from .pipeline import RevqConfig, WindowEncoding, encode_window, split_windows
from .quant import Codebook, QuantizerBank, quantize_frames
from .router import GateState, GateWeights, drps_update

_EMA_EPS = 1e-5
_GATE_INIT_STD = 0.02


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch: int = 8
    lr: float = 1e-3
    commitment_weight: float = 0.25
    ema_decay: float = 0.99
    gamma: float = 0.01
    drps_window: int = 100
    dead_threshold_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("steps and batch must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.ema_decay < 1:
            raise ConfigError("ema_decay must be in (0, 1)")
        if self.commitment_weight < 0:
            raise ConfigError("commitment_weight must be nonnegative")
        if self.gamma < 0:
            raise ConfigError("gamma must be nonnegative")
        if self.drps_window < 1:
            raise ConfigError("drps_window must be >= 1")
        if self.dead_threshold_frac < 0:
            raise ConfigError("dead_threshold_frac must be nonnegative")


@dataclass
class SyntheticLatentSource:
    """Gaussian-mixture stand-in for encoder latents.

    Every utterance is drawn from a single mixture component, so windows
    carry a cluster identity the gate can learn to exploit.
    """

    cluster_means: np.ndarray
    cluster_stds: np.ndarray
    frames_per_utterance: int = 24
    utterances_per_cluster: int = 16

    def __post_init__(self):
        self.cluster_means = np.atleast_2d(np.asarray(self.cluster_means, dtype=np.float64))
        self.cluster_stds = np.atleast_2d(np.asarray(self.cluster_stds, dtype=np.float64))
        if self.cluster_stds.shape != self.cluster_means.shape:
            raise ValueError("cluster_stds must match cluster_means in shape")
        if self.frames_per_utterance < 1 or self.utterances_per_cluster < 1:
            raise ValueError("frames and utterances per cluster must be >= 1")

    @property
    def n_clusters(self) -> int:
        return self.cluster_means.shape[0]

    @property
    def dim(self) -> int:
        return self.cluster_means.shape[1]

    @classmethod
    def separated(cls, n_clusters: int, dim: int, separation: float = 6.0,
                  spread: float = 0.5, anisotropy: float = 0.0,
                  frames_per_utterance: int = 24, utterances_per_cluster: int = 16,
                  seed: int = 0) -> "SyntheticLatentSource":
        """Means on random orthonormal directions (pairwise distance
        sqrt(2) * separation when n_clusters <= dim), diagonal spread.

        ``anisotropy`` boosts each cluster's spread on its own rotating pair
        of dimensions, giving the clusters distinct residual shapes that an
        adaptive quantizer assignment can exploit and a fixed one cannot.
        """
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal((max(n_clusters, 2), dim))
        if n_clusters <= dim:
            q, _ = np.linalg.qr(raw.T[:, :n_clusters])
            means = separation * q.T
        else:
            means = separation * raw[:n_clusters] / np.linalg.norm(
                raw[:n_clusters], axis=1, keepdims=True)
        stds = np.full((n_clusters, dim), spread)
        if anisotropy:
            for c in range(n_clusters):
                cols = [(2 * c) % dim, (2 * c + 1) % dim]
                stds[c, cols] *= 1.0 + anisotropy
        return cls(means, stds, frames_per_utterance, utterances_per_cluster)

    def sample(self, rng) -> tuple:
        """Draw all utterances; returns ``(latents, labels)`` with each latent
        a (D, frames) matrix and labels the cluster index per utterance."""
        latents, labels = [], []
        for c in range(self.n_clusters):
            for _ in range(self.utterances_per_cluster):
                noise = rng.standard_normal((self.dim, self.frames_per_utterance))
                latents.append(self.cluster_means[c][:, None]
                               + self.cluster_stds[c][:, None] * noise)
                labels.append(c)
        return latents, labels


def kmeans(data: np.ndarray, k: int, rng, iters: int = 25) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding, fixed iteration count.

    Duplicated points get zero seeding weight, so a sample made of k
    distinct repeated points yields exactly those points. Empty clusters
    keep their previous center.
    """
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if n < k:
        raise ValueError(f"k-means needs at least {k} sample rows, got {n}")
    centers = np.empty((k, data.shape[1]))
    centers[0] = data[rng.integers(n)]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            centers[j] = data[rng.choice(n, p=d2 / total)]
        else:
            centers[j] = data[rng.integers(n)]
        d2 = np.minimum(d2, np.sum((data - centers[j]) ** 2, axis=1))

    sq_data = (data ** 2).sum(axis=1, keepdims=True)
    for _ in range(iters):
        dists = sq_data - 2.0 * data @ centers.T + (centers ** 2).sum(axis=1)
        assign = np.argmin(dists, axis=1)
        for j in range(k):
            members = data[assign == j]
            if members.shape[0]:
                centers[j] = members.mean(axis=0)
    return centers


def _pin_zero_entry(centers: np.ndarray) -> np.ndarray:
    # the centroid nearest the origin moves to slot 0 and becomes exactly zero
    j = int(np.argmin(np.sum(centers ** 2, axis=1)))
    centers[[0, j]] = centers[[j, 0]]
    centers[0] = 0.0
    return centers


def init_codebooks(data_sample: np.ndarray, cfg: RevqConfig, seed: int) -> QuantizerBank:
    """Seeded k-means initialization of the full bank.

    The shared codebook(s) cluster the raw sample; routed codebooks cluster
    the residual left after the shared stage(s), each with its own seed
    stream. Entry 0 of every codebook is pinned to the zero vector.
    """
    data_sample = np.asarray(data_sample, dtype=np.float64)
    if data_sample.ndim != 2 or data_sample.shape[1] != cfg.dim:
        raise ValueError(f"data_sample must be (n, {cfg.dim})")
    if data_sample.shape[0] < cfg.codebook_size:
        raise ValueError(
            f"need at least {cfg.codebook_size} sample rows, got {data_sample.shape[0]}"
        )
    streams = np.random.SeedSequence(seed).spawn(cfg.n_shared + cfg.n_routed)
    shared = []
    residual = data_sample
    for s in range(cfg.n_shared):
        centers = _pin_zero_entry(
            kmeans(residual, cfg.codebook_size, np.random.default_rng(streams[s]))
        )
        cb = Codebook(centers)
        shared.append(cb)
        _, _, residual = quantize_frames(residual, cb)
    routed = [
        Codebook(_pin_zero_entry(kmeans(
            residual, cfg.codebook_size,
            np.random.default_rng(streams[cfg.n_shared + i]),
        )))
        for i in range(cfg.n_routed)
    ]
    return QuantizerBank(shared, routed)


# ---------------------------------------------------------------------------
# loss and gradient


def _window_terms(Z: np.ndarray, enc: WindowEncoding, commitment_weight: float):
    err = enc.reconstruction - Z
    recon = float(np.mean(err ** 2))
    return recon, commitment_weight * recon


def batch_loss_and_grad(batch, encodings, commitment_weight: float):
    """Loss report plus the analytic gradient of the batch loss w.r.t. W.

    The loss is the batch mean of per-window reconstruction MSE plus the
    commitment term (stop-gradient on the reconstruction, so it carries no
    W gradient). Through the straight-through mask, dL/dS_i for a selected
    quantizer is the inner product of dL/d(recon) with that stage's output,
    and dS_i/dW[:, i] is the window's frame-mean latent.
    """
    n = len(batch)
    dim = batch[0].dim
    loss_recon = 0.0
    loss_commit = 0.0
    grad = None
    for window, enc in zip(batch, encodings):
        Z = window.Z
        recon, commit = _window_terms(Z, enc, commitment_weight)
        loss_recon += recon / n
        loss_commit += commit / n
        if grad is None:
            grad = np.zeros((dim, enc.decision.scores.shape[0]))
        scale = 2.0 / (Z.size * n)
        err = enc.reconstruction - Z  # (D, T)
        zbar = Z.mean(axis=1)
        for j, qi in enumerate(enc.decision.selected):
            dl_dm = scale * float(np.sum(err * enc.routed_outputs[j].T))
            grad[:, qi] += zbar * dl_dm
    return loss_recon, loss_commit, grad


def frozen_batch_loss(batch, encodings, W: np.ndarray, commitment_weight: float) -> float:
    """Evaluate the straight-through linearization of the batch loss at W.

    Every stop-gradient quantity is frozen at the encoding: hard selection,
    code indices, stage outputs, and the mask offset (hard - unbiased score).
    The result is smooth (quadratic) in W and equals the forward loss when W
    equals the encoding-time weights; finite differences of this function
    define the gradient the straight-through estimator reports.
    """
    total = 0.0
    n = len(batch)
    for window, enc in zip(batch, encodings):
        Z = window.Z
        zbar = Z.mean(axis=1)
        recon = enc.reconstruction.copy()
        for j, qi in enumerate(enc.decision.selected):
            s0 = enc.decision.scores[qi]
            m = float(zbar @ W[:, qi]) + (1.0 - s0)  # soft score + frozen offset
            recon += (m - 1.0) * enc.routed_outputs[j].T
        frozen_err = enc.reconstruction - Z
        total += float(np.mean((recon - Z) ** 2)) / n
        total += commitment_weight * float(np.mean(frozen_err ** 2)) / n
    return total


# ---------------------------------------------------------------------------
# EMA codebook updates


def ema_update_codebook(cb: Codebook, inputs: np.ndarray, indices: np.ndarray,
                        decay: float) -> None:
    """EMA vector-quantization update from one batch of assignments.

    Counts and sums decay toward the batch statistics; entries become the
    Laplace-smoothed ratio. Entry 0 stays the pinned zero vector.
    """
    counts = np.bincount(indices, minlength=cb.size).astype(np.float64)
    sums = np.zeros_like(cb.ema_sums)
    np.add.at(sums, indices, inputs)
    cb.ema_counts = decay * cb.ema_counts + (1 - decay) * counts
    cb.ema_sums = decay * cb.ema_sums + (1 - decay) * sums
    total = cb.ema_counts.sum()
    smoothed = (cb.ema_counts + _EMA_EPS) / (total + cb.size * _EMA_EPS) * total
    cb.entries[1:] = cb.ema_sums[1:] / smoothed[1:, None]


def _apply_ema(bank: QuantizerBank, encodings, decay: float) -> None:
    # full-batch assignment first, then one update per codebook
    for s, cb in enumerate(bank.shared):
        inputs = np.concatenate([e.shared_inputs[s] for e in encodings])
        indices = np.concatenate([e.encoded.shared_codes[s] for e in encodings])
        ema_update_codebook(cb, inputs, indices, decay)
    for i, cb in enumerate(bank.routed):
        inputs, indices = [], []
        for e in encodings:
            for j, qi in enumerate(e.decision.selected):
                if qi == i:
                    inputs.append(e.routed_inputs[j])
                    indices.append(e.encoded.routed_codes[j])
        if inputs:
            ema_update_codebook(cb, np.concatenate(inputs), np.concatenate(indices), decay)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class StepReport:
    step: int
    loss_recon: float
    loss_commit: float
    subsets: tuple
    bias_snapshot: np.ndarray = None  # type: ignore[assignment]

    @property
    def loss(self) -> float:
        return self.loss_recon + self.loss_commit


@dataclass
class TrainResult:
    bank: QuantizerBank
    weights: GateWeights
    state: GateState
    log: list
    cfg: RevqConfig
    train_cfg: TrainConfig
    mode: str


def train_step(batch, bank: QuantizerBank, weights: GateWeights, state: GateState,
               tcfg: TrainConfig, step: int, mode: str = "revq") -> StepReport:
    """One optimization step over a batch of windows, mutating bank/weights/state.

    Encodes every window against the step-start parameters, applies the W
    gradient step and the full-batch EMA update, and fires the protection
    bias update on accumulation-window boundaries. ``mode="fixed_rvq"``
    freezes the gate (W stays zero, constant lowest-index selection).
    """
    training = mode == "revq"
    encodings = [encode_window(w, bank, weights, state, training=training) for w in batch]
    loss_recon, loss_commit, grad = batch_loss_and_grad(
        batch, encodings, tcfg.commitment_weight)
    if not np.isfinite(loss_recon) or not np.isfinite(loss_commit):
        raise NumericsError(
            f"non-finite loss at step {step}: recon={loss_recon} commit={loss_commit}"
        )
    if training:
        weights.W -= tcfg.lr * grad
    _apply_ema(bank, encodings, tcfg.ema_decay)

    bias_snapshot = None
    if training and (step + 1) % tcfg.drps_window == 0:
        expected = state.steps_in_window * weights.k_active / weights.n_routed
        new_state = drps_update(state, tcfg.gamma, tcfg.dead_threshold_frac * expected)
        state.bias, state.load = new_state.bias, new_state.load
        state.steps_in_window = new_state.steps_in_window
        bias_snapshot = state.bias.copy()

    subsets = tuple(e.decision.selected for e in encodings)
    return StepReport(step, loss_recon, loss_commit, subsets, bias_snapshot)


def train_run(source: SyntheticLatentSource, cfg: RevqConfig, tcfg: TrainConfig,
              mode: str = "revq") -> TrainResult:
    """Train a bank and gate from scratch on a synthetic source.

    ``mode="revq"`` trains routing end to end; ``mode="fixed_rvq"`` keeps a
    zero gate so the lowest k_active routed quantizers are always selected
    (tie-break), giving the fixed-chain baseline under the same budget.
    """
    if mode not in ("revq", "fixed_rvq"):
        raise ConfigError(f"unknown training mode {mode!r}")
    if source.dim != cfg.dim:
        raise ConfigError(f"source dimension {source.dim} != config dimension {cfg.dim}")
    data_seed, init_seed, gate_seed, batch_seed = (
        int(s) for s in np.random.SeedSequence(tcfg.seed).generate_state(4)
    )
    latents, _ = source.sample(np.random.default_rng(data_seed))
    pool = [w for Z in latents for w in split_windows(Z, cfg.window_frames)]
    sample = np.concatenate([Z.T for Z in latents])
    bank = init_codebooks(sample, cfg, init_seed)

    if mode == "revq":
        # small init keeps affinity gaps on the scale the protection bias
        # (gamma steps) can traverse within a desk-scale run
        W = np.random.default_rng(gate_seed).normal(
            0.0, _GATE_INIT_STD, (cfg.dim, cfg.n_routed))
    else:
        W = np.zeros((cfg.dim, cfg.n_routed))
    weights = GateWeights(W, cfg.k_active)
    state = GateState.zeros(cfg.n_routed)

    batch_rng = np.random.default_rng(batch_seed)
    log = []
    for step in range(tcfg.steps):
        picks = batch_rng.integers(0, len(pool), size=tcfg.batch)
        batch = [pool[i] for i in picks]
        log.append(train_step(batch, bank, weights, state, tcfg, step, mode))
    return TrainResult(bank, weights, state, log, cfg, tcfg, mode)


def write_training_log(fh, log) -> None:
    """CSV log: step, losses, the distinct subsets selected in the batch,
    and a bias snapshot on accumulation-window boundaries."""
    fh.write("step,loss_recon,loss_commit,selected_subset,bias_snapshot\n")
    for row in log:
        subsets = "|".join(
            "+".join(str(i) for i in subset)
            for subset in sorted(set(row.subsets))
        )
        bias = ""
        if row.bias_snapshot is not None:
            bias = ";".join(format(b, ".9g") for b in row.bias_snapshot)
        fh.write(
            f"{row.step},{row.loss_recon:.12g},{row.loss_commit:.12g},{subsets},{bias}\n"
        )

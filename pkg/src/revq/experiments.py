"""Experiment harness: usage collapse, protection-bias sweeps, and the
fixed-vs-adaptive comparison, all at desk scale on synthetic latents.

Every sweep is seeded end to end and rewrites identical CSVs on rerun.
Usage is reported two ways because the headline metric is ambiguous: the
fraction of routed quantizers ever selected, and the entropy (bits) of the
selection frequency distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .pipeline import RevqConfig, encode_window, split_windows
from .router import GateState, drps_update, topk_mask
from .trainer import SyntheticLatentSource, TrainConfig, TrainResult, train_run

_EVAL_STREAM = 0xE7A1  # keeps held-out draws disjoint from training draws


@dataclass
class UsageReport:
    """Per-quantizer selection counts over an evaluation set."""

    counts: np.ndarray
    ever_used_fraction: float
    selection_entropy: float

    @classmethod
    def from_counts(cls, counts: np.ndarray) -> "UsageReport":
        counts = np.asarray(counts, dtype=np.int64)
        used = float(np.count_nonzero(counts)) / counts.shape[0]
        total = counts.sum()
        entropy = 0.0
        if total > 0:
            p = counts[counts > 0] / total
            entropy = float(-(p * np.log2(p)).sum())
        return cls(counts, used, entropy)


def heldout_windows(source: SyntheticLatentSource, cfg: RevqConfig, seed: int) -> list:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _EVAL_STREAM]))
    latents, _ = source.sample(rng)
    return [w for Z in latents for w in split_windows(Z, cfg.window_frames)]


def evaluate(result: TrainResult, windows):
    """Inference pass over held-out windows with the trained bias frozen.

    Returns ``(per_window_mse, UsageReport)``; usage counts sum to
    len(windows) * k_active.
    """
    counts = np.zeros(result.cfg.n_routed, dtype=np.int64)
    errors = np.empty(len(windows))
    for i, window in enumerate(windows):
        enc = encode_window(window, result.bank, result.weights, result.state,
                            training=False)
        counts[list(enc.decision.selected)] += 1
        errors[i] = float(np.mean((enc.reconstruction - window.Z) ** 2))
    return errors, UsageReport.from_counts(counts)


def usage_sweep(n_routed_values, drps_on: bool, gamma: float,
                source: SyntheticLatentSource, cfg: RevqConfig,
                tcfg: TrainConfig) -> list:
    """Train one model per pool size and measure held-out usage.

    Returns ``[(n_routed, UsageReport), ...]``. With protection off the
    ever-used fraction collapses as the pool grows; turning it on recovers
    usage under the same seed.
    """
    rows = []
    for n_routed in n_routed_values:
        cfg_n = replace(cfg, n_routed=n_routed,
                        k_active=min(cfg.k_active, n_routed))
        tcfg_n = replace(tcfg, gamma=gamma if drps_on else 0.0)
        result = train_run(source, cfg_n, tcfg_n, mode="revq")
        _, usage = evaluate(result, heldout_windows(source, cfg_n, tcfg.seed))
        rows.append((n_routed, usage))
    return rows


def write_usage_csv(fh, rows, drps_on: bool, gamma: float) -> None:
    """One row per pool size; counts are semicolon-joined per-quantizer totals."""
    fh.write("n_routed,drps,gamma,ever_used_fraction,selection_entropy_bits,counts\n")
    for n_routed, usage in rows:
        counts = ";".join(str(c) for c in usage.counts)
        fh.write(f"{n_routed},{int(drps_on)},{gamma:.12g},"
                 f"{usage.ever_used_fraction:.12g},{usage.selection_entropy:.12g},"
                 f"{counts}\n")


def gamma_sweep(gammas, source: SyntheticLatentSource, cfg: RevqConfig,
                tcfg: TrainConfig) -> list:
    """Paired runs differing only in gamma.

    Returns ``[(gamma, UsageReport, final_loss, heldout_loss), ...]``.
    ``final_loss`` is the mean training reconstruction loss over the last
    quarter of the run (the converged regime, where selection churn from an
    oversized gamma shows up directly); ``heldout_loss`` is the mean
    reconstruction MSE of the frozen model on held-out windows.
    """
    rows = []
    windows = heldout_windows(source, cfg, tcfg.seed)
    tail = max(1, tcfg.steps // 4)
    for gamma in gammas:
        result = train_run(source, cfg, replace(tcfg, gamma=gamma), mode="revq")
        final_loss = float(np.mean([r.loss_recon for r in result.log[-tail:]]))
        errors, usage = evaluate(result, windows)
        rows.append((gamma, usage, final_loss, float(errors.mean())))
    return rows


def write_gamma_csv(fh, rows) -> None:
    """One row per gamma, losses as produced by :func:`gamma_sweep`."""
    fh.write("gamma,ever_used_fraction,selection_entropy_bits,final_loss,heldout_loss\n")
    for gamma, usage, final_loss, heldout_loss in rows:
        fh.write(f"{gamma:.12g},{usage.ever_used_fraction:.12g},"
                 f"{usage.selection_entropy:.12g},{final_loss:.12g},"
                 f"{heldout_loss:.12g}\n")


def _summary(errors: np.ndarray) -> dict:
    q1, median, q3 = np.percentile(errors, [25, 50, 75])
    return {"min": float(errors.min()), "q1": float(q1), "median": float(median),
            "q3": float(q3), "max": float(errors.max())}


@dataclass
class ComparisonRecord:
    fixed_errors: np.ndarray
    revq_errors: np.ndarray
    fixed_summary: dict
    revq_summary: dict
    fixed_usage: UsageReport
    revq_usage: UsageReport


def fixed_vs_adaptive(source: SyntheticLatentSource, cfg_fixed: RevqConfig,
                      cfg_revq: RevqConfig, tcfg: TrainConfig) -> ComparisonRecord:
    """Train a fixed chain and an adaptive model of equal active capacity and
    compare per-window reconstruction error on the same held-out windows."""
    if source.n_clusters < 2:
        raise ConfigError("fixed-vs-adaptive needs a source with >= 2 clusters")
    if (cfg_fixed.n_shared + cfg_fixed.k_active
            != cfg_revq.n_shared + cfg_revq.k_active):
        raise ConfigError("configs must activate the same total quantizer count")
    if cfg_fixed.codebook_size != cfg_revq.codebook_size:
        raise ConfigError("configs must share one codebook size")

    fixed = train_run(source, cfg_fixed, tcfg, mode="fixed_rvq")
    adaptive = train_run(source, cfg_revq, tcfg, mode="revq")
    windows = heldout_windows(source, cfg_revq, tcfg.seed)
    fixed_errors, fixed_usage = evaluate(fixed, windows)
    revq_errors, revq_usage = evaluate(adaptive, windows)
    return ComparisonRecord(fixed_errors, revq_errors,
                            _summary(fixed_errors), _summary(revq_errors),
                            fixed_usage, revq_usage)


def write_comparison_csv(fh, record: ComparisonRecord) -> None:
    """Two rows (fixed_rvq, revq) of per-window MSE distribution summaries."""
    fh.write("mode,min,q1,median,q3,max,ever_used_fraction\n")
    for mode, summary, usage in (
        ("fixed_rvq", record.fixed_summary, record.fixed_usage),
        ("revq", record.revq_summary, record.revq_usage),
    ):
        fh.write(f"{mode},{summary['min']:.12g},{summary['q1']:.12g},"
                 f"{summary['median']:.12g},{summary['q3']:.12g},"
                 f"{summary['max']:.12g},{usage.ever_used_fraction:.12g}\n")


def write_window_errors_csv(fh, record: ComparisonRecord) -> None:
    fh.write("window,fixed_mse,revq_mse\n")
    for i, (fe, re_) in enumerate(zip(record.fixed_errors, record.revq_errors)):
        fh.write(f"{i},{fe:.12g},{re_:.12g}\n")


def simulate_static_routing(scores: np.ndarray, k: int, gamma: float,
                            n_windows: int, update_every: int = 1,
                            dead_threshold_frac: float = 0.1) -> UsageReport:
    """Routing-only simulation with fixed affinity scores.

    Replays the selection/bias loop without any quantization: skewed scores
    plus the protection update show how many quantizers ever get selected.
    With gamma 0 the selection never changes; with a positive gamma starved
    quantizers accumulate bias until they enter the top k.
    """
    scores = np.asarray(scores, dtype=np.float64)
    state = GateState.zeros(scores.shape[0])
    counts = np.zeros(scores.shape[0], dtype=np.int64)
    for w in range(n_windows):
        decision = topk_mask(scores + state.bias, k, scores=scores)
        counts[list(decision.selected)] += 1
        state.load[list(decision.selected)] += 1
        state.steps_in_window += 1
        if (w + 1) % update_every == 0:
            expected = state.steps_in_window * k / scores.shape[0]
            new_state = drps_update(state, gamma, dead_threshold_frac * expected)
            state.bias, state.load = new_state.bias, new_state.load
            state.steps_in_window = 0
    return UsageReport.from_counts(counts)

"""Residual-experts vector quantization: a quantizer bank with one shared
stage and a gated pool of routed residual stages, the bit-exact codec
stream it implies, and the tiered-STFT spectral front end."""

from .bitstream import overhead_bps, pack, unpack
from .errors import (ConfigError, DataFormatError, IntegrityError, NumericsError,
                     RevqError, TruncationError)
from .modelfile import load_model, save_model
from .pipeline import (EncodedWindow, LatentWindow, RevqConfig, expansion_stats,
                       revq_decode, revq_encode, split_windows)
from .quant import Codebook, QuantCode, QuantizerBank, quantize_nearest, rvq_chain
from .router import (GateState, GateWeights, RoutingDecision, compute_affinity,
                     drps_update, route_window, ste_mask, topk_mask)
from .spectral import Spectrum, TierSpec, mtsd_forward, stft, tier_partition
from .trainer import (SyntheticLatentSource, TrainConfig, init_codebooks,
                      train_run, train_step)

__version__ = "0.1.0"

__all__ = [
    "Codebook", "ConfigError", "DataFormatError", "EncodedWindow", "GateState",
    "GateWeights", "IntegrityError", "LatentWindow", "NumericsError", "QuantCode",
    "QuantizerBank", "RevqConfig", "RevqError", "RoutingDecision", "Spectrum",
    "SyntheticLatentSource", "TierSpec", "TrainConfig", "TruncationError",
    "compute_affinity", "drps_update", "expansion_stats", "init_codebooks",
    "load_model", "mtsd_forward", "overhead_bps", "pack", "quantize_nearest",
    "revq_decode", "revq_encode", "route_window", "rvq_chain", "save_model",
    "split_windows", "ste_mask", "stft", "tier_partition", "topk_mask",
    "train_run", "train_step", "unpack",
]

"""STFT front end and the multi-tiered spectral discriminator stack.

Three sub-discriminators consume 256-, 512- and 1024-bin spectra whose
bins are partitioned periodically into 2, 4 and 8 tiers, so every tier is
128 bins long and all three share one convolutional architecture. The
forward pass here is shape-faithful and deterministic under fixed weights;
adversarial training is out of scope.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .errors import DataFormatError

KERNEL = (3, 9)
STRIDE = (1, 2)
PAD = (1, 4)
HIDDEN_CHANNELS = (32, 64, 128, 256)
TIER_DUMP_MAGIC = b"RVQT"


@dataclass(frozen=True)
class TierSpec:
    """One sub-discriminator's resolution: bin count f and tier period p."""

    fft_bins: int
    period: int

    def __post_init__(self):
        if self.fft_bins < 1 or self.period < 1:
            raise ValueError("fft_bins and period must be >= 1")
        if self.fft_bins % self.period:
            raise ValueError(f"period {self.period} must divide fft_bins {self.fft_bins}")

    @property
    def tier_len(self) -> int:
        return self.fft_bins // self.period

    @property
    def fft_size(self) -> int:
        # bins stay below Nyquist so the period divides them exactly
        return 2 * self.fft_bins


DEFAULT_TIERS = (TierSpec(256, 2), TierSpec(512, 4), TierSpec(1024, 8))


@dataclass
class Spectrum:
    """Magnitude/phase planes of shape (bins, frames); phase in (-pi, pi]."""

    magnitude: np.ndarray
    phase: np.ndarray

    @property
    def bins(self) -> int:
        return self.magnitude.shape[0]

    @property
    def frames(self) -> int:
        return self.magnitude.shape[1]


def stft(signal, fft_size: int, hop: int) -> Spectrum:
    """Hann-windowed STFT keeping the fft_size/2 bins below Nyquist.

    Frames start every ``hop`` samples with no centering; a signal shorter
    than one window yields a single zero-padded frame.
    """
    signal = np.asarray(signal, dtype=np.float64).ravel()
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise ValueError("fft_size must be a power of two")
    if hop < 1:
        raise ValueError("hop must be >= 1")
    if signal.shape[0] < fft_size:
        padded = np.zeros(fft_size)
        padded[:signal.shape[0]] = signal
        frames = padded[None, :]
    else:
        n_frames = 1 + (signal.shape[0] - fft_size) // hop
        starts = hop * np.arange(n_frames)
        frames = signal[starts[:, None] + np.arange(fft_size)[None, :]]
    window = get_window("hann", fft_size, fftbins=True)
    spectrum = np.fft.rfft(frames * window, axis=1)[:, :fft_size // 2]
    phase = np.angle(spectrum)
    phase[phase <= -np.pi] += 2 * np.pi  # arctan2 of -0.0j lands on -pi
    return Spectrum(np.abs(spectrum).T, phase.T)


def tier_partition(spec_channel: np.ndarray, period: int) -> list:
    """Split bin rows into ``period`` interleaved tiers of equal length.

    Tier t holds rows {t, t+p, t+2p, ...} in ascending order; the tiers are
    disjoint and cover every bin, so interleaving them back is the identity.
    """
    spec_channel = np.asarray(spec_channel)
    bins = spec_channel.shape[0]
    if period < 1 or bins % period:
        raise ValueError(f"period {period} must divide the {bins} bin rows")
    return [spec_channel[t::period] for t in range(period)]


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
           stride=STRIDE, pad=PAD) -> np.ndarray:
    """Plain strided cross-correlation: (C_in, H, W) -> (C_out, H', W')."""
    ph, pw = pad
    x = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    kh, kw = weight.shape[2], weight.shape[3]
    patches = sliding_window_view(x, (kh, kw), axis=(1, 2))
    patches = patches[:, ::stride[0], ::stride[1]]
    out = np.tensordot(weight, patches, axes=([1, 2, 3], [0, 3, 4]))
    return out + bias[:, None, None]


def _leaky_relu(x, slope=0.1):
    return np.where(x >= 0, x, slope * x)


@dataclass
class MtsdWeights:
    """Per-sub-discriminator conv parameters: list of (weight, bias) stacks."""

    layers: list  # one list of (weight, bias) per sub-discriminator
    phase_layout: str = "time"


def init_mtsd_weights(specs=DEFAULT_TIERS, seed: int = 0,
                      phase_layout: str = "time") -> MtsdWeights:
    """Kaiming-style uniform fan-in init, seeded for reproducible tests.

    ``phase_layout`` fixes how magnitude and phase are combined and thereby
    the first layer's channel count: "time" appends phase frames after
    magnitude frames along the time axis (first conv sees tier_len
    channels), "channels" stacks them (2 * tier_len channels).
    """
    if phase_layout not in ("time", "channels"):
        raise ValueError("phase_layout must be 'time' or 'channels'")
    rng = np.random.default_rng(seed)
    kh, kw = KERNEL
    all_layers = []
    for spec in specs:
        in_ch = spec.tier_len if phase_layout == "time" else 2 * spec.tier_len
        layers = []
        for out_ch in (*HIDDEN_CHANNELS, 1):
            fan_in = in_ch * kh * kw
            bound = np.sqrt(3.0 / fan_in)
            weight = rng.uniform(-bound, bound, size=(out_ch, in_ch, kh, kw))
            bias = rng.uniform(-bound, bound, size=out_ch)
            layers.append((weight, bias))
            in_ch = out_ch
        all_layers.append(layers)
    return MtsdWeights(all_layers, phase_layout)


def _sub_input(signal, spec: TierSpec, phase_layout: str) -> np.ndarray:
    """Build one sub-discriminator's input tensor from a raw signal.

    Channels index the position inside a tier (tier_len of them), height
    indexes the tier, width is time: tensor[c, h, w] = bins[h + c*p, w].
    """
    sp = stft(signal, spec.fft_size, spec.fft_size // 4)
    if phase_layout == "time":
        plane = np.concatenate([sp.magnitude, sp.phase], axis=1)
        return plane.reshape(spec.tier_len, spec.period, -1)
    mag = sp.magnitude.reshape(spec.tier_len, spec.period, -1)
    phase = sp.phase.reshape(spec.tier_len, spec.period, -1)
    return np.concatenate([mag, phase], axis=0)


def mtsd_forward(signal, weights: MtsdWeights, specs=DEFAULT_TIERS) -> list:
    """Run all sub-discriminators; every post-convolution feature map is
    retained as logits, so each sub-discriminator returns one feature map
    per conv layer (channel progression 32, 64, 128, 256, 1)."""
    if len(specs) != len(weights.layers):
        raise ValueError("one weight stack per tier spec required")
    outputs = []
    for spec, layers in zip(specs, weights.layers):
        x = _sub_input(signal, spec, weights.phase_layout)
        features = []
        for i, (weight, bias) in enumerate(layers):
            x = conv2d(x, weight, bias)
            features.append(x)
            if i < len(layers) - 1:
                x = _leaky_relu(x)
        outputs.append(features)
    return outputs


def write_tier_dump(fh, spec_channel: np.ndarray, period: int) -> None:
    """Binary tier dump: magic, u32 f, u32 p, u32 T, then the p tiers of
    (f/p) x T float32 rows concatenated in tier order."""
    tiers = tier_partition(spec_channel, period)
    bins, frames = spec_channel.shape
    fh.write(TIER_DUMP_MAGIC)
    fh.write(struct.pack("<III", bins, period, frames))
    for tier in tiers:
        fh.write(np.ascontiguousarray(tier, dtype="<f4").tobytes())


def read_tier_dump(fh):
    magic = fh.read(4)
    if magic != TIER_DUMP_MAGIC:
        raise DataFormatError(f"bad tier dump magic {magic!r}")
    header = fh.read(12)
    if len(header) != 12:
        raise DataFormatError("truncated tier dump header")
    bins, period, frames = struct.unpack("<III", header)
    if period < 1 or bins % period:
        raise DataFormatError("tier dump header has a period that does not divide bins")
    tiers = []
    for _ in range(period):
        raw = fh.read(4 * (bins // period) * frames)
        if len(raw) != 4 * (bins // period) * frames:
            raise DataFormatError("truncated tier dump payload")
        tiers.append(np.frombuffer(raw, dtype="<f4").reshape(bins // period, frames))
    return tiers

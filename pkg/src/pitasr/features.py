"""Log mel filter bank feature extraction with corpus-level CMVN."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .model import FeatureSequence

LOG_FLOOR = 1e-10
CMVN_VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class FrameConfig:
    """STFT frame grid and mel bank layout."""

    sample_rate: int = 8000
    win_length: int = 256
    hop_length: int = 128
    num_filters: int = 40

    @property
    def num_bins(self) -> int:
        return self.win_length // 2 + 1

    @property
    def fmax(self) -> float:
        return self.sample_rate / 2.0

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.win_length:
            raise ValueError(f"waveform of {num_samples} samples is shorter than "
                             f"one window ({self.win_length})")
        return (num_samples - self.win_length) // self.hop_length + 1

    def num_samples(self, num_frames: int) -> int:
        return num_frames * self.hop_length + (self.win_length - self.hop_length)


@dataclass
class CmvnStats:
    """Per-dimension mean/variance, computed over the training split only."""

    mean: np.ndarray
    var: np.ndarray


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(config: FrameConfig) -> np.ndarray:
    """Center frequency in Hz of each triangular filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(config.fmax),
                                  config.num_filters + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(config: FrameConfig) -> np.ndarray:
    """num_filters x num_bins triangular weights (peak 1) over 0..sample_rate/2."""
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(config.fmax),
                                  config.num_filters + 2))
    bin_freqs = np.fft.rfftfreq(config.win_length, d=1.0 / config.sample_rate)
    weights = np.zeros((config.num_filters, config.num_bins))
    for i in range(config.num_filters):
        lo, center, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        weights[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return weights


def frame_signal(waveform: np.ndarray, config: FrameConfig) -> np.ndarray:
    """Slice the waveform into overlapping frames (T x win_length)."""
    waveform = np.asarray(waveform, dtype=np.float64).reshape(-1)
    t = config.num_frames(waveform.shape[0])
    idx = (np.arange(config.win_length)[None, :]
           + config.hop_length * np.arange(t)[:, None])
    return waveform[idx]


def stft_magnitude(waveform: np.ndarray, config: FrameConfig) -> np.ndarray:
    """Hann-windowed magnitude spectrum, T x num_bins."""
    frames = frame_signal(waveform, config)
    return np.abs(np.fft.rfft(frames * np.hanning(config.win_length), axis=1))


def apply_cmvn(frames: np.ndarray, stats: CmvnStats) -> np.ndarray:
    return (frames - stats.mean) / np.sqrt(stats.var + CMVN_VAR_FLOOR)


def compute_cmvn(feature_matrices) -> CmvnStats:
    """Pooled per-dimension mean/variance over all frames of all matrices."""
    stacked = np.concatenate([np.asarray(m, dtype=np.float64) for m in feature_matrices], axis=0)
    return CmvnStats(mean=stacked.mean(axis=0), var=stacked.var(axis=0))


def extract_features(waveform: np.ndarray, config: FrameConfig = FrameConfig(),
                     cmvn: CmvnStats | None = None,
                     utterance_id: str = "") -> FeatureSequence:
    """Log mel filter bank features; normalized if CMVN statistics are given."""
    mag = stft_magnitude(waveform, config)
    feats = np.log(mag @ mel_filterbank(config).T + LOG_FLOOR)
    if cmvn is not None:
        feats = apply_cmvn(feats, cmvn)
    return FeatureSequence(frames=feats, utterance_id=utterance_id)

"""Synthetic talker simulation and two-talker mixing at controlled SNR.

Talkers are parametric: each senone is a pair of formant sines with a
per-speaker frequency signature, senone 0 is silence. Senone sequences come
from a Markov chain, so utterances have realistic run lengths and known
frame-exact alignments. Mixtures are plain sample-wise sums after scaling the
quieter source to hit the designated energy ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import FrameConfig
from .model import FeatureSequence
from .pit import LabelSequence

SILENCE_ID = 0
SELF_TRANSITION = 0.9
EDGE_SILENCE_FRAMES = 2
SOURCE_NOISE_DB = -30.0   # noise floor relative to base_gain
PAD_NOISE_DB = -40.0      # padding noise relative to the high-energy RMS
MIN_UTTERANCE_FRAMES = 5
LENGTH_RATIO = (3, 4)     # shortest admissible short:long frame-count ratio


@dataclass
class SpeakerProfile:
    """One synthetic talker: formant table indexed by senone, plus gain/pitch."""

    speaker_id: int
    base_gain: float
    formants: np.ndarray  # K x 2 of (f1, f2) in Hz; row 0 is silence (zeros)
    pitch_offset: float

    def __post_init__(self):
        self.formants = np.asarray(self.formants, dtype=np.float64)


@dataclass
class SourceUtterance:
    """Single-talker waveform with its frame-aligned senone labels."""

    waveform: np.ndarray
    labels: LabelSequence
    speaker_id: int
    num_frames: int


@dataclass
class MixMetadata:
    snr_db: float
    high_energy_speaker: int      # index into the target list (0 = first input)
    original_lengths: list[int]   # pre-padding frame counts, input order


@dataclass
class MixtureSample:
    """A mixed utterance: features plus one label stream per talker.

    Clean single-talker utterances reuse this container with a single target
    and snr_db=None, so the trainer and scorer handle both uniformly.
    """

    features: FeatureSequence
    targets: list[LabelSequence]
    snr_db: float | None
    high_energy_speaker: int = 0
    original_lengths: list[int] = field(default_factory=list)


def build_speaker_pool(pool_size: int, num_senones: int, seed: int,
                       frame: FrameConfig = FrameConfig()) -> list[SpeakerProfile]:
    """Deterministic pool of talkers with shared senone bands, per-speaker jitter.

    Senone k (k >= 1) gets a nominal first formant spread over 400..2400 Hz and
    a second formant 800 Hz above it; each speaker warps both by a few percent
    and adds a pitch offset, which is the cue a model can latch onto for
    stream tracing.
    """
    if pool_size < 2:
        raise ValueError("speaker pool needs at least 2 speakers to form pairs")
    rng = np.random.default_rng(seed)
    k = num_senones
    nominal_f1 = np.zeros(k)
    if k > 1:
        span = np.linspace(400.0, 2400.0, k - 1)
        nominal_f1[1:] = span
    profiles = []
    for sid in range(pool_size):
        jitter = rng.uniform(0.96, 1.04, size=(k, 2))
        formants = np.zeros((k, 2))
        formants[1:, 0] = nominal_f1[1:] * jitter[1:, 0]
        formants[1:, 1] = (nominal_f1[1:] + 800.0) * jitter[1:, 1]
        pitch = rng.uniform(-30.0, 30.0)
        gain = rng.uniform(0.6, 1.0)
        if np.any(formants >= frame.sample_rate / 2.0):
            raise ValueError("formant table exceeds the Nyquist frequency")
        profiles.append(SpeakerProfile(speaker_id=sid, base_gain=gain,
                                       formants=formants, pitch_offset=pitch))
    return profiles


def _senone_sequence(num_frames: int, num_senones: int, rng) -> np.ndarray:
    """Markov chain over voiced senones with 2 silence frames at each edge."""
    labels = np.full(num_frames, SILENCE_ID, dtype=np.int64)
    voiced = num_frames - 2 * EDGE_SILENCE_FRAMES
    states = num_senones - 1
    current = int(rng.integers(1, num_senones))
    for i in range(voiced):
        labels[EDGE_SILENCE_FRAMES + i] = current
        if states > 1 and rng.random() >= SELF_TRANSITION:
            # uniform over the other voiced senones
            step = int(rng.integers(1, states))
            current = 1 + (current - 1 + step) % states
    return labels


def gen_utterance(profile: SpeakerProfile, num_frames: int, seed: int,
                  frame: FrameConfig = FrameConfig()) -> SourceUtterance:
    """Synthesize one labeled single-talker utterance, deterministic in seed.

    Voiced frames emit base_gain * (sin(f1 + pitch) + 0.7 sin(f2 + pitch)) with
    oscillator phase carried across frame boundaries; a white noise floor at
    -30 dB relative to base_gain runs under everything, and silence frames are
    noise floor only.
    """
    if num_frames < MIN_UTTERANCE_FRAMES:
        raise ValueError(f"num_frames must be >= {MIN_UTTERANCE_FRAMES}, got {num_frames}")
    rng = np.random.default_rng(seed)
    labels = _senone_sequence(num_frames, profile.formants.shape[0], rng)

    total = frame.num_samples(num_frames)
    noise_std = profile.base_gain * 10.0 ** (SOURCE_NOISE_DB / 20.0)
    wave = rng.normal(0.0, noise_std, size=total)

    hop = frame.hop_length
    phase = np.zeros(2)
    for t in range(num_frames):
        start = t * hop
        stop = total if t == num_frames - 1 else start + hop
        senone = labels[t]
        if senone == SILENCE_ID:
            continue
        n = stop - start
        freqs = profile.formants[senone] + profile.pitch_offset
        steps = 2.0 * np.pi * freqs / frame.sample_rate
        ramp = np.arange(1, n + 1)
        wave[start:stop] += profile.base_gain * (
            np.sin(phase[0] + steps[0] * ramp) + 0.7 * np.sin(phase[1] + steps[1] * ramp))
        phase = (phase + steps * n) % (2.0 * np.pi)
    return SourceUtterance(waveform=wave, labels=LabelSequence(labels),
                           speaker_id=profile.speaker_id, num_frames=num_frames)


def snr_scale(e_high: float, e_low: float, target_snr_db: float) -> float:
    """Amplitude factor for the low-energy source so the energy ratio is exact.

    Returns a with 10 log10(e_high / (a^2 e_low)) == target_snr_db.
    """
    if e_high <= 0 or e_low <= 0:
        raise ValueError(f"energies must be positive, got e_high={e_high}, e_low={e_low}")
    return float(np.sqrt(e_high / (e_low * 10.0 ** (target_snr_db / 10.0))))


def _pad_split(pad: int) -> tuple[int, int]:
    # half front / half end, front takes the floor on odd remainders
    front = pad // 2
    return front, pad - front


def mix_pair(a: SourceUtterance, b: SourceUtterance, target_snr_db: float,
             seed: int, frame: FrameConfig = FrameConfig()):
    """Mix two different-talker utterances at an exact designated SNR.

    The longer utterance is the high-energy reference (ties go to a). The
    shorter one is scaled to the target energy ratio over the full pre-padding
    signals, padded to length with low-level noise split front/end, and its
    labels padded with silence at the same frames. Returns
    (mixed waveform, [targets in input order], MixMetadata).
    """
    if a.speaker_id == b.speaker_id:
        raise ValueError(f"mix_pair: both sources are speaker {a.speaker_id}")
    short, long_ = (a, b) if a.num_frames < b.num_frames else (b, a)
    if short.num_frames * LENGTH_RATIO[1] < long_.num_frames * LENGTH_RATIO[0]:
        raise ValueError(f"mix_pair: frame counts {a.num_frames} and {b.num_frames} "
                         f"exceed the {LENGTH_RATIO[0]}:{LENGTH_RATIO[1]} length ratio")

    high = a if a.num_frames >= b.num_frames else b
    low = b if high is a else a
    e_high = float(np.sum(high.waveform ** 2))
    e_low = float(np.sum(low.waveform ** 2))
    gain = snr_scale(e_high, e_low, target_snr_db)

    pad_frames = high.num_frames - low.num_frames
    front_frames, end_frames = _pad_split(pad_frames)
    hop = frame.hop_length

    rng = np.random.default_rng(seed)
    pad_std = 10.0 ** (PAD_NOISE_DB / 20.0) * float(np.sqrt(np.mean(high.waveform ** 2)))
    low_wave = np.concatenate([
        rng.normal(0.0, pad_std, size=front_frames * hop),
        gain * low.waveform,
        rng.normal(0.0, pad_std, size=end_frames * hop),
    ])
    low_labels = np.concatenate([
        np.full(front_frames, SILENCE_ID, dtype=np.int64),
        low.labels.senones,
        np.full(end_frames, SILENCE_ID, dtype=np.int64),
    ])

    mixed = high.waveform + low_wave
    if high is a:
        targets = [LabelSequence(a.labels.senones.copy(), stream_tag=0),
                   LabelSequence(low_labels, stream_tag=1)]
        meta = MixMetadata(snr_db=float(target_snr_db), high_energy_speaker=0,
                           original_lengths=[a.num_frames, b.num_frames])
    else:
        targets = [LabelSequence(low_labels, stream_tag=0),
                   LabelSequence(b.labels.senones.copy(), stream_tag=1)]
        meta = MixMetadata(snr_db=float(target_snr_db), high_energy_speaker=1,
                           original_lengths=[a.num_frames, b.num_frames])
    return mixed, targets, meta

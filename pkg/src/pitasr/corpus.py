"""Corpus generation and on-disk serialization.

A corpus is a directory: ``manifest.json`` plus per-split ``feats.bin``
(little-endian float32, row-major, raw log mel features) and ``labels.bin``
(little-endian uint32 senone ids). Mixture splits are ``train``/``eval``; the
unmixed source utterances land in ``train_clean``/``eval_clean`` so a
single-talker baseline can be trained from the same corpus. The manifest
carries enough generation metadata (speaker profiles, per-sample seeds) to
re-synthesize any waveform bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import CmvnStats, FrameConfig, apply_cmvn, compute_cmvn, extract_features
from .mixer import MixtureSample, SpeakerProfile, build_speaker_pool, gen_utterance, mix_pair
from .model import FeatureSequence
from .pit import LabelSequence

FORMAT_VERSION = 1
MIXTURE_SPLITS = ("train", "eval")
CLEAN_SPLITS = ("train_clean", "eval_clean")


def derive_seed(*parts) -> int:
    """Stable 63-bit sub-seed from a tuple of seed parts (ints/strings)."""
    text = ":".join(str(p) for p in parts)
    digest = hashlib.blake2s(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFFFFFFFFFFFFFF


@dataclass(frozen=True)
class CorpusSpec:
    """What to generate: split sizes, talker pool, SNR set, utterance lengths."""

    train_mixtures: int = 500
    eval_mixtures: int = 50
    speaker_pool: int = 20
    snr_set: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0)
    num_senones: int = 8
    min_frames: int = 28
    max_frames: int = 44
    seed: int = 1
    frame: FrameConfig = field(default_factory=FrameConfig)

    def __post_init__(self):
        if not self.snr_set:
            raise ValueError("snr_set must be non-empty")
        if self.train_mixtures < 1:
            raise ValueError("train_mixtures must be >= 1")
        if self.min_frames < 5 or self.max_frames < self.min_frames:
            raise ValueError("need 5 <= min_frames <= max_frames")


def _speaker_pairs(spec: CorpusSpec) -> tuple[list, list]:
    """Disjoint train/eval pools of unordered speaker pairs."""
    pairs = [(i, j) for i in range(spec.speaker_pool) for j in range(i + 1, spec.speaker_pool)]
    rng = np.random.default_rng(derive_seed(spec.seed, "pairs"))
    rng.shuffle(pairs)
    if spec.eval_mixtures == 0:
        return pairs, []
    total = spec.train_mixtures + spec.eval_mixtures
    n_eval = max(1, (len(pairs) * spec.eval_mixtures) // total)
    n_eval = min(n_eval, len(pairs) - 1)
    return pairs[n_eval:], pairs[:n_eval]


def _plan_sample(spec: CorpusSpec, split: str, index: int, pair_pool: list):
    """Deterministic per-sample draw: speakers, lengths, snr, seeds."""
    rng = np.random.default_rng(derive_seed(spec.seed, split, index))
    pair = pair_pool[int(rng.integers(len(pair_pool)))]
    if rng.random() < 0.5:
        pair = (pair[1], pair[0])
    t_long = int(rng.integers(spec.min_frames, spec.max_frames + 1))
    t_short_min = -(-3 * t_long // 4)  # ceil, keeps the 3:4 length ratio
    t_short = int(rng.integers(t_short_min, t_long + 1))
    lengths = (t_long, t_short) if rng.random() < 0.5 else (t_short, t_long)
    return {
        "id": f"{split}-{index:06d}",
        "speakers": [pair[0], pair[1]],
        "lengths": lengths,
        "snr_db": float(spec.snr_set[index % len(spec.snr_set)]),
        "utt_seeds": [derive_seed(spec.seed, split, index, "utt", 0),
                      derive_seed(spec.seed, split, index, "utt", 1)],
        "mix_seed": derive_seed(spec.seed, split, index, "mix"),
    }


def _build_sample(args):
    """Worker body: synthesize one mixture and its two clean sources."""
    plan, profiles, frame = args
    a = gen_utterance(profiles[0], plan["lengths"][0], plan["utt_seeds"][0], frame)
    b = gen_utterance(profiles[1], plan["lengths"][1], plan["utt_seeds"][1], frame)
    mixed, targets, meta = mix_pair(a, b, plan["snr_db"], plan["mix_seed"], frame)
    feats_mix = extract_features(mixed, frame).frames.astype("<f4")
    clean = []
    for src in (a, b):
        clean.append((extract_features(src.waveform, frame).frames.astype("<f4"),
                      src.labels.senones.astype("<u4"), src.speaker_id, src.num_frames))
    labels = np.concatenate([t.senones for t in targets]).astype("<u4")
    return feats_mix, labels, meta, clean


class _SplitWriter:
    """Accumulates one split's matrices and emits offset-bearing records."""

    def __init__(self):
        self.feat_chunks: list[np.ndarray] = []
        self.label_chunks: list[np.ndarray] = []
        self.records: list[dict] = []
        self._feat_offset = 0
        self._label_offset = 0

    def add(self, record: dict, feats: np.ndarray, labels: np.ndarray):
        record = dict(record)
        record["feat_offset"] = self._feat_offset
        record["label_offset"] = self._label_offset
        self._feat_offset += feats.size
        self._label_offset += labels.size
        self.feat_chunks.append(feats)
        self.label_chunks.append(labels)
        self.records.append(record)

    def write(self, directory: Path):
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "feats.bin", "wb") as fh:
            for chunk in self.feat_chunks:
                fh.write(np.ascontiguousarray(chunk, dtype="<f4").tobytes())
        with open(directory / "labels.bin", "wb") as fh:
            for chunk in self.label_chunks:
                fh.write(np.ascontiguousarray(chunk, dtype="<u4").tobytes())


def gen_corpus(spec: CorpusSpec, out_dir, workers: int = 1) -> dict:
    """Generate, serialize, and return the manifest of a full corpus.

    Samples are balanced round-robin over the SNR set, train/eval speaker
    pairs are disjoint, and everything is a pure function of spec.seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    profiles = build_speaker_pool(spec.speaker_pool, spec.num_senones,
                                  derive_seed(spec.seed, "pool"), spec.frame)
    train_pairs, eval_pairs = _speaker_pairs(spec)

    writers = {name: _SplitWriter() for name in MIXTURE_SPLITS + CLEAN_SPLITS}
    for split, count, pair_pool in (("train", spec.train_mixtures, train_pairs),
                                    ("eval", spec.eval_mixtures, eval_pairs)):
        plans = [_plan_sample(spec, split, i, pair_pool) for i in range(count)]
        jobs = [(plan, (profiles[plan["speakers"][0]], profiles[plan["speakers"][1]]), spec.frame)
                for plan in plans]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                built = list(pool.map(_build_sample, jobs, chunksize=8))
        else:
            built = [_build_sample(job) for job in jobs]

        clean_writer = writers[f"{split}_clean"]
        for plan, (feats_mix, labels, meta, clean) in zip(plans, built):
            record = {
                "id": plan["id"],
                "snr_db": plan["snr_db"],
                "speakers": plan["speakers"],
                "high_energy": meta.high_energy_speaker,
                "num_frames": int(feats_mix.shape[0]),
                "original_lengths": meta.original_lengths,
                "utt_seeds": plan["utt_seeds"],
                "mix_seed": plan["mix_seed"],
            }
            writers[split].add(record, feats_mix, labels)
            for source_index, (cfeats, clabels, speaker_id, t) in enumerate(clean):
                clean_writer.add({
                    "id": f"{plan['id']}-src{source_index}",
                    "speaker": int(speaker_id),
                    "num_frames": int(t),
                    "seed": plan["utt_seeds"][source_index],
                }, cfeats, clabels)

    cmvn = compute_cmvn(writers["train"].feat_chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "sample_rate": spec.frame.sample_rate,
        "win_length": spec.frame.win_length,
        "hop_length": spec.frame.hop_length,
        "feat_dim": spec.frame.num_filters,
        "num_senones": spec.num_senones,
        "snr_set": [float(s) for s in spec.snr_set],
        "seed": spec.seed,
        "cmvn": {"mean": cmvn.mean.tolist(), "var": cmvn.var.tolist()},
        "speaker_profiles": [
            {"speaker_id": p.speaker_id, "base_gain": p.base_gain,
             "pitch_offset": p.pitch_offset, "formants": p.formants.tolist()}
            for p in profiles
        ],
        "splits": {name: {"samples": writers[name].records}
                   for name in MIXTURE_SPLITS + CLEAN_SPLITS},
    }
    for name, writer in writers.items():
        writer.write(out / name)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
    return manifest


class CorpusReader:
    """Read access to a serialized corpus; features come back CMVN-normalized."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        try:
            with open(manifest_path, encoding="utf-8") as fh:
                self.manifest = json.load(fh)
        except OSError as exc:
            raise ValueError(f"cannot read corpus manifest {manifest_path}: {exc}") from exc
        if self.manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported corpus format_version in {manifest_path}")
        self.frame = FrameConfig(sample_rate=self.manifest["sample_rate"],
                                 win_length=self.manifest["win_length"],
                                 hop_length=self.manifest["hop_length"],
                                 num_filters=self.manifest["feat_dim"])
        self.cmvn = CmvnStats(mean=np.asarray(self.manifest["cmvn"]["mean"]),
                              var=np.asarray(self.manifest["cmvn"]["var"]))
        self._arrays: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def feat_dim(self) -> int:
        return self.manifest["feat_dim"]

    @property
    def num_senones(self) -> int:
        return self.manifest["num_senones"]

    @property
    def snr_set(self) -> list[float]:
        return list(self.manifest["snr_set"])

    def speaker_profiles(self) -> list[SpeakerProfile]:
        return [SpeakerProfile(speaker_id=p["speaker_id"], base_gain=p["base_gain"],
                               formants=np.asarray(p["formants"]),
                               pitch_offset=p["pitch_offset"])
                for p in self.manifest["speaker_profiles"]]

    def _split_arrays(self, split: str):
        if split not in self._arrays:
            base = self.root / split
            feats = np.fromfile(base / "feats.bin", dtype="<f4")
            labels = np.fromfile(base / "labels.bin", dtype="<u4")
            self._arrays[split] = (feats, labels)
        return self._arrays[split]

    def _features(self, split: str, record: dict) -> FeatureSequence:
        feats, _ = self._split_arrays(split)
        t = record["num_frames"]
        f = self.feat_dim
        start = record["feat_offset"]
        raw = feats[start:start + t * f].astype(np.float64).reshape(t, f)
        return FeatureSequence(frames=apply_cmvn(raw, self.cmvn), utterance_id=record["id"])

    def load_mixtures(self, split: str) -> list[MixtureSample]:
        if split not in MIXTURE_SPLITS:
            raise ValueError(f"unknown mixture split {split!r}")
        _, labels = self._split_arrays(split)
        samples = []
        for record in self.manifest["splits"][split]["samples"]:
            t = record["num_frames"]
            start = record["label_offset"]
            targets = [LabelSequence(labels[start + u * t:start + (u + 1) * t].astype(np.int64),
                                     stream_tag=u)
                       for u in range(2)]
            samples.append(MixtureSample(
                features=self._features(split, record),
                targets=targets,
                snr_db=record["snr_db"],
                high_energy_speaker=record["high_energy"],
                original_lengths=list(record["original_lengths"])))
        return samples

    def load_clean(self, split: str) -> list[MixtureSample]:
        """Unmixed source utterances as degenerate single-target samples."""
        if split not in CLEAN_SPLITS:
            raise ValueError(f"unknown clean split {split!r}")
        _, labels = self._split_arrays(split)
        samples = []
        for record in self.manifest["splits"][split]["samples"]:
            t = record["num_frames"]
            start = record["label_offset"]
            target = LabelSequence(labels[start:start + t].astype(np.int64), stream_tag=0)
            samples.append(MixtureSample(
                features=self._features(split, record),
                targets=[target],
                snr_db=None,
                high_energy_speaker=0,
                original_lengths=[t]))
        return samples

    def find_record(self, utterance_id: str) -> tuple[str, dict]:
        for split, payload in self.manifest["splits"].items():
            for record in payload["samples"]:
                if record["id"] == utterance_id:
                    return split, record
        raise ValueError(f"utterance {utterance_id!r} not found in corpus manifest")

    def regenerate_waveform(self, utterance_id: str) -> np.ndarray:
        """Re-synthesize a mixture (or clean source) waveform from its seeds."""
        split, record = self.find_record(utterance_id)
        profiles = self.speaker_profiles()
        if split in CLEAN_SPLITS:
            utt = gen_utterance(profiles[record["speaker"]], record["num_frames"],
                                record["seed"], self.frame)
            return utt.waveform
        a = gen_utterance(profiles[record["speakers"][0]], record["original_lengths"][0],
                          record["utt_seeds"][0], self.frame)
        b = gen_utterance(profiles[record["speakers"][1]], record["original_lengths"][1],
                          record["utt_seeds"][1], self.frame)
        mixed, _, _ = mix_pair(a, b, record["snr_db"], record["mix_seed"], self.frame)
        return mixed

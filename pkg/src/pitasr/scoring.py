"""Decoding and best-permutation scoring.

Hypotheses are per-frame argmax senones per output stream; token sequences are
the silence-stripped run-length collapse of those. S hypotheses are scored
against S references under the permutation that minimizes total error, chosen
per utterance, and errors are reported per SNR condition and per high/low
energy role (roles come from mixture metadata, never from the hypotheses).
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, PosteriorStreams, forward
from .pit import MAX_STREAMS

SILENCE_ID = 0

EVAL_MODES = ("pit", "single_head_on_mixture", "single_head_on_clean")

CLEAN_KEY = "clean"


def frame_decode(posteriors: PosteriorStreams) -> list[np.ndarray]:
    """Per-stream frame-wise argmax senones; ties go to the lowest id."""
    return [np.argmax(s, axis=1).astype(np.int64) for s in posteriors.streams]


def collapse_tokens(frame_ids) -> list[int]:
    """Merge consecutive duplicates, then drop silence."""
    ids = np.asarray(frame_ids, dtype=np.int64).reshape(-1)
    tokens = []
    prev = None
    for v in ids:
        if v != prev:
            if v != SILENCE_ID:
                tokens.append(int(v))
            prev = v
    return tokens


def edit_distance(hyp, ref) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    hyp = list(hyp)
    ref = list(ref)
    if not hyp:
        return len(ref)
    if not ref:
        return len(hyp)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        current = [i]
        for j, r in enumerate(ref, start=1):
            current.append(min(prev[j] + 1,
                               current[j - 1] + 1,
                               prev[j - 1] + (h != r)))
        prev = current
    return prev[-1]


def _frame_errors(hyp: np.ndarray, ref: np.ndarray) -> int:
    if hyp.shape != ref.shape:
        raise ValueError(f"frame sequences differ in length: {hyp.shape} vs {ref.shape}")
    return int(np.sum(hyp != ref))


def pairwise_score(hyps, refs, metric: str = "frame"):
    """Best-permutation scoring of S hypothesis streams against S references.

    metric "frame": streams are frame-id arrays, error = mismatched frames.
    metric "token": streams are token lists, error = edit distance.
    Returns (errors_by_ref, perm) where perm[s] is the reference assigned to
    hypothesis s and errors_by_ref[u] is the error of the hypothesis paired
    with reference u. Ties pick the lexicographically smallest permutation.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypothesis streams vs {len(refs)} references")
    s = len(hyps)
    if s > MAX_STREAMS:
        raise ValueError(f"pairwise_score: {s} streams unsupported (max {MAX_STREAMS})")
    if metric == "frame":
        cost = lambda h, r: _frame_errors(h, r)
    elif metric == "token":
        cost = edit_distance
    else:
        raise ValueError(f"unknown metric {metric!r}")

    pair = [[cost(hyps[i], refs[u]) for u in range(s)] for i in range(s)]
    best_perm = None
    best_total = None
    for perm in itertools.permutations(range(s)):
        total = sum(pair[i][perm[i]] for i in range(s))
        if best_total is None or total < best_total:
            best_total = total
            best_perm = perm
    errors_by_ref = [0] * s
    for i, u in enumerate(best_perm):
        errors_by_ref[u] = pair[i][u]
    return errors_by_ref, best_perm


@dataclass
class _Bucket:
    frame_errors: int = 0
    frames: int = 0
    token_edits: int = 0
    ref_tokens: int = 0
    utterances: int = 0


@dataclass
class ScoreReport:
    """Error rates per (SNR condition, energy role), plus aggregate counts."""

    buckets: dict = field(default_factory=dict)

    def _bucket(self, snr_key, role) -> _Bucket:
        return self.buckets.setdefault((snr_key, role), _Bucket())

    def add(self, snr_key, role, frame_errors, frames, token_edits, ref_tokens):
        b = self._bucket(snr_key, role)
        b.frame_errors += frame_errors
        b.frames += frames
        b.token_edits += token_edits
        b.ref_tokens += ref_tokens
        b.utterances += 1

    def frame_error_rate(self, snr_key=None, role=None) -> float:
        errors, frames = 0, 0
        for (s, r), b in self.buckets.items():
            if (snr_key is None or s == snr_key) and (role is None or r == role):
                errors += b.frame_errors
                frames += b.frames
        return errors / frames if frames else float("nan")

    def token_error_rate(self, snr_key=None, role=None) -> float:
        edits, tokens = 0, 0
        for (s, r), b in self.buckets.items():
            if (snr_key is None or s == snr_key) and (role is None or r == role):
                edits += b.token_edits
                tokens += b.ref_tokens
        return edits / tokens if tokens else float("nan")

    def sorted_keys(self):
        def order(key):
            snr, role = key
            return (1 if snr == CLEAN_KEY else 0,
                    snr if snr != CLEAN_KEY else 0.0,
                    role)
        return sorted(self.buckets, key=order)

    def to_csv(self) -> str:
        lines = ["snr_db,role,frame_error_rate,token_error_rate,utterances"]
        for key in self.sorted_keys():
            snr, role = key
            b = self.buckets[key]
            snr_text = snr if snr == CLEAN_KEY else f"{snr:g}"
            fer = b.frame_errors / b.frames if b.frames else float("nan")
            ter = b.token_edits / b.ref_tokens if b.ref_tokens else float("nan")
            lines.append(f"{snr_text},{role},{fer:.6f},{ter:.6f},{b.utterances}")
        total_utts = sum(b.utterances for b in self.buckets.values())
        lines.append(f"all,all,{self.frame_error_rate():.6f},"
                     f"{self.token_error_rate():.6f},{total_utts}")
        return "\n".join(lines) + "\n"


def _roles(sample) -> list[str]:
    if len(sample.targets) == 1:
        return ["single"]
    return ["high" if u == sample.high_energy_speaker else "low"
            for u in range(len(sample.targets))]


def _snr_key(sample):
    return CLEAN_KEY if sample.snr_db is None else float(sample.snr_db)


def score_posteriors(posteriors: PosteriorStreams, sample, mode: str, report: ScoreReport):
    """Score one utterance's posteriors into the report."""
    hyp_frames = frame_decode(posteriors)
    hyp_tokens = [collapse_tokens(h) for h in hyp_frames]
    ref_frames = [t.senones for t in sample.targets]
    ref_tokens = [collapse_tokens(r) for r in ref_frames]
    roles = _roles(sample)
    snr = _snr_key(sample)

    if mode == "single_head_on_mixture":
        # One hypothesis scored against each reference separately.
        if len(hyp_frames) != 1:
            raise ValueError("single_head_on_mixture expects a single-stream model")
        for u, ref in enumerate(ref_frames):
            report.add(snr, roles[u],
                       _frame_errors(hyp_frames[0], ref), ref.shape[0],
                       edit_distance(hyp_tokens[0], ref_tokens[u]), len(ref_tokens[u]))
        return

    if mode not in ("pit", "single_head_on_clean"):
        raise ValueError(f"unknown eval mode {mode!r}; expected one of {EVAL_MODES}")
    if len(hyp_frames) != len(ref_frames):
        raise ValueError(f"{len(hyp_frames)} hypothesis streams vs "
                         f"{len(ref_frames)} reference streams")
    frame_errs, _ = pairwise_score(hyp_frames, ref_frames, metric="frame")
    token_errs, _ = pairwise_score(hyp_tokens, ref_tokens, metric="token")
    for u in range(len(ref_frames)):
        report.add(snr, roles[u], frame_errs[u], ref_frames[u].shape[0],
                   token_errs[u], len(ref_tokens[u]))


def evaluate_corpus(model, samples, mode: str = "pit", workers: int = 1) -> ScoreReport:
    """Decode and score a sample list.

    model is either ModelParams or a callable sample -> PosteriorStreams (the
    latter supports oracle/diagnostic posteriors). Aggregation runs in input
    order, so the report is deterministic regardless of worker count.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown eval mode {mode!r}; expected one of {EVAL_MODES}")
    if callable(model):
        posterior_fn = model
    else:
        posterior_fn = lambda sample: forward(model, sample.features)

    report = ScoreReport()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            posteriors = list(pool.map(posterior_fn, samples))
    else:
        posteriors = [posterior_fn(s) for s in samples]
    for post, sample in zip(posteriors, samples):
        score_posteriors(post, sample, mode, report)
    return report

"""Command-line entry point wiring corpus generation, training, and scoring.

All randomness flows from one --seed through named sub-seeds (corpus, init,
shuffle), so a whole experiment reproduces from a single knob. Flags override
config-file values which override built-in defaults, and the fully resolved
configuration is echoed to <out>/config.resolved before any work starts.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .corpus import CorpusReader, CorpusSpec, derive_seed, gen_corpus
from .features import stft_magnitude
from .model import ModelConfig, forward, init_params, load_checkpoint
from .pit import pit_gradient_check
from .scoring import evaluate_corpus
from .trainer import TrainConfig, train, train_baseline

log = logging.getLogger("pitasr")

GRADCHECK_THRESHOLD = 1e-4

_MODE_NAMES = {
    "pit": "pit",
    "single-on-mix": "single_head_on_mixture",
    "single-on-clean": "single_head_on_clean",
}

_DEFAULTS = {
    "gen-corpus": {
        "train": 500, "eval": 50, "snrs": "0,5,10,15,20", "speakers": 20,
        "senones": 8, "min_frames": 28, "max_frames": 44, "seed": 1, "workers": 1,
    },
    "train": {
        "streams": 2, "hidden": 64, "layers": 2, "lr": 0.05, "epochs": 10,
        "minibatch": 8, "clip": 0.0003, "clip_mode": "element", "seed": 1,
        "lr_halving": True,
    },
    "eval": {"mode": "pit", "split": "eval", "workers": 1},
    "gradcheck": {"seed": 7},
    "dump": {},
}
_DEFAULTS["train-baseline"] = dict(_DEFAULTS["train"], streams=1)


def _setup_logging():
    level = {"debug": logging.DEBUG, "info": logging.INFO,
             "warn": logging.WARNING}.get(os.environ.get("PIT_LOG", "info").lower(),
                                          logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pitasr",
        description="Train and score multi-head BLSTM acoustic models on "
                    "synthetic two-talker mixtures with permutation-invariant CE.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic mixture corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--train", type=int, help="number of training mixtures")
    p.add_argument("--eval", type=int, help="number of evaluation mixtures")
    p.add_argument("--snrs", help="comma-separated SNR conditions in dB")
    p.add_argument("--speakers", type=int, help="speaker pool size")
    p.add_argument("--senones", type=int, help="senone inventory size (incl. silence)")
    p.add_argument("--min-frames", type=int, dest="min_frames")
    p.add_argument("--max-frames", type=int, dest="max_frames")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--workers", type=int, help="parallel generation workers")
    p.add_argument("--config", help="JSON config file (flags override it)")

    for name, streams_flag in (("train", True), ("train-baseline", False)):
        p = sub.add_parser(name, help=("train a multi-head model with the "
                                       "permutation-invariant loss" if streams_flag
                                       else "train the single-talker baseline on clean data"))
        p.add_argument("--corpus", required=True, help="corpus directory")
        p.add_argument("--out", required=True, help="checkpoint directory")
        if streams_flag:
            p.add_argument("--streams", type=int, help="output heads (talkers)")
        p.add_argument("--hidden", type=int, help="LSTM cells per direction")
        p.add_argument("--layers", type=int, help="BLSTM layers")
        p.add_argument("--lr", type=float, help="learning rate")
        p.add_argument("--epochs", type=int)
        p.add_argument("--minibatch", type=int, help="utterances per minibatch")
        p.add_argument("--clip", type=float, help="gradient clip threshold")
        p.add_argument("--clip-mode", dest="clip_mode", choices=["element", "norm"])
        p.add_argument("--no-lr-halving", dest="lr_halving", action="store_false",
                       default=None)
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--config", help="JSON config file (flags override it)")

    p = sub.add_parser("eval", help="score a checkpoint on a corpus split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--mode", choices=sorted(_MODE_NAMES))
    p.add_argument("--split", choices=["train", "eval"], help="mixture split to score")
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.add_argument("--workers", type=int)
    p.add_argument("--config", help="JSON config file (flags override it)")

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny end-to-end model")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("dump", help="dump one utterance's spectrogram and posteriors")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--utterance", required=True, help="utterance id from the manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file (flags override it)")
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    merged = dict(_DEFAULTS.get(command, {}))
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            file_values = json.load(fh)
        if not isinstance(file_values, dict):
            raise ValueError(f"config file {config_path} must hold a JSON object")
        unknown = set(file_values) - set(merged)
        if unknown:
            raise ValueError(f"config file {config_path}: unknown keys {sorted(unknown)}")
        merged.update(file_values)
    for key in merged:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    for key in ("out", "corpus", "model", "utterance", "split"):
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _write_resolved(out_dir: Path, command: str, cfg: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **cfg}
    with open(out_dir / "config.resolved", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _parse_snrs(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    try:
        return tuple(float(v) for v in str(text).split(","))
    except ValueError:
        raise ValueError(f"cannot parse SNR list {text!r}") from None


def cmd_gen_corpus(cfg: dict) -> int:
    out = Path(cfg["out"])
    _write_resolved(out, "gen-corpus", cfg)
    spec = CorpusSpec(train_mixtures=cfg["train"], eval_mixtures=cfg["eval"],
                      speaker_pool=cfg["speakers"], snr_set=_parse_snrs(cfg["snrs"]),
                      num_senones=cfg["senones"], min_frames=cfg["min_frames"],
                      max_frames=cfg["max_frames"],
                      seed=derive_seed(cfg["seed"], "corpus"))
    manifest = gen_corpus(spec, out, workers=cfg["workers"])
    counts = {name: len(manifest["splits"][name]["samples"]) for name in manifest["splits"]}
    log.info("wrote corpus to %s: %s", out, counts)
    return 0


def _run_training(command: str, cfg: dict) -> int:
    reader = CorpusReader(cfg["corpus"])
    out = Path(cfg["out"])
    _write_resolved(out, command, cfg)
    baseline = command == "train-baseline"
    model_config = ModelConfig(feat_dim=reader.feat_dim, hidden_dim=cfg["hidden"],
                               num_layers=cfg["layers"],
                               num_streams=1 if baseline else cfg["streams"],
                               num_senones=reader.num_senones,
                               seed=derive_seed(cfg["seed"], "init"))
    params = init_params(model_config)
    train_config = TrainConfig(learning_rate=cfg["lr"], clip_threshold=cfg["clip"],
                               clip_mode=cfg["clip_mode"],
                               minibatch_utterances=cfg["minibatch"],
                               epochs=cfg["epochs"],
                               shuffle_seed=derive_seed(cfg["seed"], "shuffle"),
                               checkpoint_dir=out, lr_halving=cfg["lr_halving"])
    if baseline:
        samples = reader.load_clean("train_clean")
        heldout = reader.load_clean("eval_clean")
        report = train_baseline(params, samples, train_config, heldout)
    else:
        samples = reader.load_mixtures("train")
        heldout = reader.load_mixtures("eval")
        report = train(params, samples, train_config, heldout)
    last = report.epochs[-1]
    log.info("finished: train_j=%.4f heldout_j=%.4f checkpoint=%s",
             last.train_j, last.heldout_j, report.final_checkpoint)
    print(report.final_checkpoint)
    return 0


def cmd_eval(cfg: dict) -> int:
    reader = CorpusReader(cfg["corpus"])
    params = load_checkpoint(cfg["model"])
    mode = _MODE_NAMES[cfg["mode"]]
    if mode == "single_head_on_clean":
        samples = reader.load_clean(f"{cfg['split']}_clean")
    else:
        samples = reader.load_mixtures(cfg["split"])
    report = evaluate_corpus(params, samples, mode=mode, workers=cfg["workers"])
    text = report.to_csv()
    if cfg.get("out"):
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg["out"]).write_text(text, encoding="utf-8")
        log.info("wrote report to %s", cfg["out"])
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    err = pit_gradient_check(seed=cfg["seed"])
    print(f"max_rel_err={err:.1e}")
    return 0 if err < GRADCHECK_THRESHOLD else 1


def _write_pgm(path: Path, image: np.ndarray):
    """8-bit binary PGM with a linear gray map over the image's range."""
    lo, hi = float(image.min()), float(image.max())
    scaled = np.zeros_like(image) if hi == lo else (image - lo) / (hi - lo)
    gray = np.round(scaled * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def cmd_dump(cfg: dict) -> int:
    reader = CorpusReader(cfg["corpus"])
    params = load_checkpoint(cfg["model"])
    out = Path(cfg["out"])
    _write_resolved(out, "dump", cfg)
    utt_id = cfg["utterance"]
    split, record = reader.find_record(utt_id)

    waveform = reader.regenerate_waveform(utt_id)
    log_mag = np.log(stft_magnitude(waveform, reader.frame) + 1e-10)
    _write_pgm(out / f"{utt_id}.pgm", log_mag.T[::-1])  # freq up, time right

    if split.endswith("_clean"):
        samples = {s.features.utterance_id: s for s in reader.load_clean(split)}
    else:
        samples = {s.features.utterance_id: s for s in reader.load_mixtures(split)}
    sample = samples[utt_id]
    posteriors = forward(params, sample.features)

    k = posteriors.streams[0].shape[1]
    header = (["frame"]
              + [f"ref_s{u}" for u in range(len(sample.targets))]
              + [f"p_s{s}_k{j}" for s in range(len(posteriors.streams)) for j in range(k)])
    lines = [",".join(header)]
    for t in range(sample.features.num_frames):
        row = [str(t)]
        row += [str(int(target.senones[t])) for target in sample.targets]
        for stream in posteriors.streams:
            row += [f"{v:.6f}" for v in stream[t]]
        lines.append(",".join(row))
    (out / f"{utt_id}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("dumped %s to %s", utt_id, out)
    return 0


_COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": lambda cfg: _run_training("train", cfg),
    "train-baseline": lambda cfg: _run_training("train-baseline", cfg),
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "dump": cmd_dump,
}


def run(argv) -> int:
    """Parse argv and execute one subcommand; returns the process exit code."""
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        return _COMMANDS[args.command](cfg)
    except (ValueError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return run(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``udtsep <command> ...``.

Commands:
    synth-data    write a synthetic toy corpus
    make-testset  draw fixed 0 dB test mixtures (with stems) from a corpus
    train         train a UDT or supervised model from a JSON run config
    separate      run a trained model on one mixture WAV
    evaluate      score estimates (or a model's outputs) against references
    grad-check    finite-difference verification of all gradients

Exit codes: 0 success, 1 config / I/O error, 2 non-finite training loss,
3 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .corpus import ToyConfig, synth_toy_corpus
from .dsp import StftConfig, read_wav, write_wav
from .model import NonFiniteLossError, separate
from .pipeline import RunConfig, evaluate_manifest, load_manifest, make_testset, run_training
from .verify import run_grad_checks

log = logging.getLogger("udtsep")

EXIT_OK, EXIT_CONFIG, EXIT_NONFINITE, EXIT_GRADCHECK = 0, 1, 2, 3


def _fail(msg: str, code: int = EXIT_CONFIG) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


# commands ---------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    try:
        counts = synth_toy_corpus(args.out, args.n, ToyConfig(duration=args.duration), seed=args.seed)
    except OSError as exc:
        return _fail(f"could not write corpus to {args.out}: {exc}")
    for pool, n in counts.items():
        print(f"{pool}: {n} files")
    return EXIT_OK


def cmd_make_testset(args) -> int:
    try:
        manifest = make_testset(args.corpus, args.out, args.n, args.seed, args.clip_seconds)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    print(f"wrote {args.n} items; manifest {manifest}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    data = {}
    if args.config:
        with open(args.config) as f:
            data = json.load(f)
    cfg = RunConfig.from_dict(data)
    # every flag that was given overrides the config file
    for f in fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            setattr(cfg, f.name, val)
    return cfg


def cmd_train(args) -> int:
    try:
        cfg = _run_config(args)
        cfg.validate()
    except (OSError, ValueError, TypeError) as exc:
        return _fail(f"bad config: {exc}")

    def progress(step, loss):
        if args.log_every and step % args.log_every == 0:
            print(f"step {step} total {loss.total:.6f}", flush=True)

    try:
        run_training(cfg, resume=args.resume, progress=progress)
    except NonFiniteLossError as exc:
        return _fail(str(exc), EXIT_NONFINITE)
    except (OSError, ValueError, CheckpointError) as exc:
        return _fail(str(exc))
    print(f"checkpoint {cfg.checkpoint}; loss log {cfg.loss_log}")
    return EXIT_OK


def _load_model(path):
    model, _, header = load_checkpoint(path)
    stft = header.get("extra", {}).get("stft")
    return model, (StftConfig(**stft) if stft else StftConfig())


def cmd_separate(args) -> int:
    try:
        model, stft_cfg = _load_model(args.ckpt)
        mix = read_wav(args.inp)
        est = separate(model, mix, stft_cfg)
        write_wav(args.out, est)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    print(f"wrote {args.out} ({len(est)} samples)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        items = load_manifest(args.manifest)
        model, stft_cfg = _load_model(args.ckpt) if args.ckpt else (None, None)
        if args.estimates_dir:
            Path(args.estimates_dir).mkdir(parents=True, exist_ok=True)
        report = evaluate_manifest(items, model, stft_cfg, args.estimates_dir)
        report.write_csv(args.csv)
        report.write_summary(args.summary)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        return _fail(str(exc))
    summ = report.summary()
    print(json.dumps(summ, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    res = run_grad_checks(args.precision, seed=args.seed, tamper=args.inject_wrong_gradient)
    for name, err in sorted(res.errors.items()):
        flag = "ok" if err < res.threshold else "FAIL"
        print(f"{flag:4s} {name:40s} {err:.3e}")
    verdict = "PASS" if res.passed else "FAIL"
    print(f"{verdict}: worst {res.worst:.3e} (threshold {res.threshold:g}, "
          f"{res.precision} precision, {res.seconds:.1f} s)")
    return EXIT_OK if res.passed else EXIT_GRADCHECK


# parser -----------------------------------------------------------------------

_TRAIN_FLAGS = {
    "corpus": str, "seed": int, "steps": int, "batch_size": int, "crop_frames": int,
    "clip_seconds": float, "window_size": int, "hop": int, "fft_size": int, "kept_bins": int,
    "width": int, "n_blocks": int, "kernel_width": int, "dropout": float, "dtype": str,
    "w_rec": float, "w_cc": float, "w_l2": float, "lr": float, "beta1": float, "beta2": float,
    "adam_eps": float, "checkpoint": str, "loss_log": str, "recipe_log": str, "checkpoint_every": int,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udtsep", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log warnings and info to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a synthetic toy corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=40, help="files per pool")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--duration", type=float, default=3.0, help="seconds per file")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("make-testset", help="write fixed test mixtures plus stems and a manifest")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=30)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--clip-seconds", type=float, default=2.0)
    s.set_defaults(func=cmd_make_testset)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", help="JSON run config (keys as in RunConfig)")
    s.add_argument("--mode", choices=("udt", "supervised"))
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--log-every", type=int, default=100)
    for name, typ in _TRAIN_FLAGS.items():
        s.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("separate", help="separate one mixture WAV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("evaluate", help="compute SI-SDR / SIR / SAR")
    s.add_argument("--manifest", required=True, help="JSONL manifest or directory of triples")
    s.add_argument("--ckpt", help="produce estimates from the mixtures with this model")
    s.add_argument("--csv", default="eval.csv")
    s.add_argument("--summary", default="eval_summary.json")
    s.add_argument("--estimates-dir", help="also write the model's estimates here")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("grad-check", help="verify gradients by finite differences")
    s.add_argument("--precision", choices=("double", "single"), default="double")
    s.add_argument("--seed", type=int, default=0)
    # test hook: corrupts one backward rule so the suite must fail
    s.add_argument("--inject-wrong-gradient", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``train``, ``enhance``, ``profile``, ``eval``.

Examples::

    zipenhancer profile --all-presets --duration 2
    zipenhancer train --preset S-tiny --steps 200 --checkpoint-dir runs/tiny
    zipenhancer enhance runs/tiny/latest.ckpt noisy/ --out enhanced/
    zipenhancer eval clean/ enhanced/ --out metrics.csv

Set ``ZIPENH_LOG`` to ``error``, ``info`` or ``debug`` to control logging.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import complexity, dsp, metrics
from . import tensors as T
from .codec import enhance
from .config import PRESET_TABLE, S_FAMILY, RunConfig, load_run_config, preset, preset_stft
from .train import PairedData, TrainingDiverged, new_state, train_loop

log = logging.getLogger("zipenhancer")

EXIT_USAGE = 2
EXIT_DIVERGED = 3


def _setup_logging() -> None:
    level = os.environ.get("ZIPENH_LOG", "info").strip().lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise SystemExit(f"ZIPENH_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def _thread_limit(n: int | None):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _overrides(args) -> dict[str, str]:
    out = {}
    if getattr(args, "preset", None):
        out["model.preset"] = args.preset
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        out["train.seed"] = str(args.seed)
    if getattr(args, "steps", None) is not None:
        out["train.steps"] = str(args.steps)
    if getattr(args, "checkpoint_dir", None):
        out["train.checkpoint_dir"] = args.checkpoint_dir
    if getattr(args, "f64_checkpoint", False):
        out["train.f64_checkpoint"] = "true"
    if getattr(args, "data_dir", None):
        out["data.source"] = "paired-directory"
        out["data.dir"] = args.data_dir
    return out


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    tc = cfg.train
    ckpt_dir = Path(args.out or tc.checkpoint_dir)
    if not ckpt_dir.is_dir():
        log.error("checkpoint directory %s does not exist", ckpt_dir)
        return EXIT_USAGE
    log.info("effective config: %s", cfg.to_json())
    (ckpt_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    if cfg.data.source == "synthetic":
        data = PairedData.synthetic(cfg.data.n_pairs, cfg.data.seed, cfg.data.duration_s,
                                    (cfg.data.snr_min, cfg.data.snr_max))
    elif cfg.data.source == "paired-directory":
        data = PairedData.from_directory(cfg.data.dir)
    else:
        log.error("unknown data.source %r", cfg.data.source)
        return EXIT_USAGE

    config_dict = cfg.to_dict()
    with T.precision(tc.precision):
        if args.resume:
            state = ckpt_io.to_state(ckpt_io.load(args.resume), tc.precision)
            log.info("resumed from %s at step %d", args.resume, state.step)
        else:
            state = new_state(cfg.model, tc.seed, tc.precision)

        def save(st) -> None:
            c = ckpt_io.from_state(st, config_dict, f64=tc.f64_checkpoint)
            ckpt_io.save(ckpt_dir / f"step_{st.step:07d}.ckpt", c)
            ckpt_io.save(ckpt_dir / "latest.ckpt", c)
            log.info("checkpoint written at step %d", st.step)

        remaining = tc.steps - state.step if args.resume and args.total_steps else tc.steps
        try:
            train_loop(state, data, max(remaining, 0), cfg.stft, cfg.loss, cfg.eden,
                       batch_size=tc.batch_size, segment_seconds=tc.segment_seconds, seed=tc.seed,
                       metrics_path=ckpt_dir / "metrics.csv", checkpoint_fn=save,
                       checkpoint_every=tc.checkpoint_every)
        except TrainingDiverged as e:
            log.error("%s", e)
            return EXIT_DIVERGED
    return 0


# ---------------------------------------------------------------------------
# enhance
# ---------------------------------------------------------------------------

def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.wav"))
        if not files:
            raise FileNotFoundError(f"no WAV files in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(path)
    return [path]


def cmd_enhance(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    run = RunConfig.from_dict(ckpt.config)
    model = ckpt_io.build_model(ckpt, args.precision)
    src = Path(args.input)
    files = _inputs(src)
    if src.is_dir():
        out_dir = Path(args.out or "enhanced")
        out_dir.mkdir(parents=True, exist_ok=True)
        targets = [out_dir / f.name for f in files]
    else:
        targets = [Path(args.out or src.with_name(src.stem + "_enhanced.wav"))]
    for f, dst in zip(files, targets):
        wave = dsp.read_wav(f)
        out = enhance(wave, model, run.stft)
        dsp.write_wav(dst, out)
        log.info("%s -> %s (%d samples)", f, dst, len(out))
    return 0


# ---------------------------------------------------------------------------
# profile
# ---------------------------------------------------------------------------

def cmd_profile(args) -> int:
    if args.all_presets:
        cfgs = [(preset(n), preset_stft(n)) for n in S_FAMILY]
    elif args.config:
        run = load_run_config(args.config, _overrides(args))
        cfgs = [(run.model, run.stft)]
    else:
        name = args.preset or "S"
        cfgs = [(preset(name), preset_stft(name))]
    reports = [complexity.count_flops(m, args.duration, s) for m, s in cfgs]
    print(complexity.format_table(reports))
    if args.breakdown:
        for r in reports:
            print(f"\n[{r.name}]")
            print(complexity.format_breakdown(r))
    if args.out:
        Path(args.out).write_text(complexity.format_csv(reports))
        log.info("wrote %s", args.out)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    rows = metrics.evaluate_dirs(args.ref_dir, args.est_dir, args.out)
    for r in rows:
        print(f"{r['file']:<32} SI-SDR {r['si_sdr_db']:8.3f} dB   SSNR {r['ssnr_db']:7.3f} dB")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--preset", choices=sorted(PRESET_TABLE), help="model preset")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="BLAS thread limit (1 = bit-reproducible)")
    common.add_argument("--out", help="output path")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="config override, e.g. --set train.batch_size=2")

    p = argparse.ArgumentParser(prog="zipenhancer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--steps", type=int)
    t.add_argument("--checkpoint-dir", help="existing directory for checkpoints and metrics.csv")
    t.add_argument("--f64-checkpoint", action="store_true", help="store 64-bit tensors")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--total-steps", action="store_true",
                   help="with --resume, treat --steps as the final global step")
    t.add_argument("--data-dir", help="directory with noisy/ and clean/ WAVs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", parents=[common], help="enhance WAV file(s)")
    e.add_argument("checkpoint")
    e.add_argument("input", help="WAV file or directory of WAVs")
    e.add_argument("--precision", default="float32", choices=["float32", "float64"])
    e.set_defaults(func=cmd_enhance)

    pr = sub.add_parser("profile", parents=[common], help="parameter/FLOP table")
    pr.add_argument("--all-presets", action="store_true", help="all S-family rows")
    pr.add_argument("--duration", type=float, default=1.0, help="input seconds (default 1)")
    pr.add_argument("--breakdown", action="store_true", help="per-module costs")
    pr.set_defaults(func=cmd_profile)

    ev = sub.add_parser("eval", parents=[common], help="SI-SDR / SSNR of estimates vs references")
    ev.add_argument("ref_dir")
    ev.add_argument("est_dir")
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except (FileNotFoundError, KeyError, ValueError, dsp.WavError) as e:
        log.error("%s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

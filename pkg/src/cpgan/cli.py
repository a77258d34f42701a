"""Command-line entry point: ``cpgan <subcommand> [flags]``.

Exit status is 0 on success, 1 for invalid input (usage, config, data
format) and 2 when a run fails.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, RunConfig, build_config, write_effective
from .data.io import DatasetFormatError, dataset_hash, read_dataset, write_dataset, write_ppm
from .data.synth import WORD_ID, decode, generate_dataset
from .text_encoder import MemoryBank

logger = logging.getLogger("cpgan")

SUBCOMMANDS = ("gen-data", "build-memory", "pretrain-damsm", "train", "eval", "synth", "selftest")
LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value config file")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--preset", default="desk", choices=("desk", "paper-shape"))
    common.add_argument("--threads", type=int, default=None, help="BLAS threads")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible reductions")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")

    p = _Parser(prog="cpgan", description="Desk-scale text-to-image synthesis pipeline.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    g.add_argument("--count", type=int, help="number of samples (overrides the config)")
    m = sub.add_parser("build-memory", parents=[common], help="build the word memory bank")
    m.add_argument("--data", type=Path, required=True)
    pd = sub.add_parser("pretrain-damsm", parents=[common], help="phase 1: pretrain the matching encoders")
    pd.add_argument("--data", type=Path, required=True)
    pd.add_argument("--memory", type=Path)
    t = sub.add_parser("train", parents=[common], help="phase 2: adversarial training")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--checkpoint", type=Path, required=True, help="checkpoint to start or resume from")
    e = sub.add_parser("eval", parents=[common], help="R-precision and SOA of generated images")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, help="evaluation dataset (default: fresh held-out scenes)")
    s = sub.add_parser("synth", parents=[common], help="write generated images for captions")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--captions", type=Path, required=True, help="text file, one caption per line")
    sub.add_parser("selftest", parents=[common], help="run the built-in invariant and oracle checks")
    return p


def _config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "count", None) is not None:
        overrides["count"] = str(args.count)
    return build_config(args.preset, args.config, overrides)


def _write_manifest(out: Path, cfg: RunConfig, **extra) -> None:
    rows = {"config_hash": cfg.hash(), "seed": cfg.seed, **extra}
    (out / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in rows.items()))


def _trainer(cfg: RunConfig, samples, memory=None, log=None):
    from .train import Trainer

    return Trainer(cfg, samples, memory, log)


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = args.out / "dataset"
    samples = generate_dataset(cfg.count, cfg.seed, cfg.resolution, cfg.top_r)
    write_dataset(out, samples, seed=cfg.seed, resolution=cfg.resolution, extra={"config_hash": cfg.hash()})
    print(f"wrote {len(samples)} samples to {out}  sha256={dataset_hash(out)}")
    return 0


def cmd_build_memory(args, cfg: RunConfig) -> int:
    from .train import build_word_memory

    bank = build_word_memory(read_dataset(args.data), cfg)
    bank.save(args.out / "memory.bin")
    _write_manifest(args.out, cfg, artifact="memory.bin", data=dataset_hash(args.data))
    print(f"memory bank: {int((bank.counts > 0).sum())} of {bank.vocab_size} words observed")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    memory = MemoryBank.load(args.memory) if args.memory else None
    tr = _trainer(cfg, read_dataset(args.data), memory, args.out / "loss.csv")
    for epoch in range(cfg.epochs_damsm):
        logger.info("matching epoch %d: mean loss %.4f", epoch, tr.pretrain_epoch())
    tr.save(args.out / "checkpoint.cpgc")
    _write_manifest(args.out, cfg, artifact="checkpoint.cpgc", phase="damsm", steps=tr.step["damsm"])
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    tr = _trainer(cfg, read_dataset(args.data), log=args.out / "loss.csv")
    tr.load(args.checkpoint)
    target = cfg.epochs_gan * tr.batches_per_epoch
    ckpt = args.out / "checkpoint.cpgc"
    while tr.step["gan"] < target:
        losses = tr.gan_step()
        if tr.step["gan"] % tr.batches_per_epoch == 0:
            logger.info("gan step %d: %s", tr.step["gan"], {k: round(v, 4) for k, v in losses.items()})
            tr.save(ckpt)
    tr.save(ckpt)
    _write_manifest(args.out, cfg, artifact="checkpoint.cpgc", phase="gan", steps=tr.step["gan"])
    return 0


def _load_models(cfg: RunConfig, checkpoint: Path):
    from .train import Models, load_checkpoint

    tensors, _ = load_checkpoint(checkpoint)
    models = Models(cfg, np.random.default_rng(0))
    models.load_state_dict(tensors)
    models.text.memory = T.Tensor(tensors["memory.vectors"])
    return models


def cmd_eval(args, cfg: RunConfig) -> int:
    from .evaluate import EVAL_SEED_OFFSET, evaluate_models, write_metrics

    models = _load_models(cfg, args.checkpoint)
    if args.data:
        samples = read_dataset(args.data)
    else:
        samples = generate_dataset(cfg.eval_count, cfg.seed + EVAL_SEED_OFFSET, cfg.resolution, cfg.top_r)
    res = evaluate_models(models, samples, cfg.n_candidates, cfg.seed, cfg.noise_threshold)
    rows = [("r_precision", res["r_precision"], res["n"]), ("soa_c", res["soa_c"], res["n_objects"]),
            ("soa_i", res["soa_i"], res["n_objects"])]
    write_metrics(args.out / "metrics.csv", rows, cfg.hash())
    for name, value, n in rows:
        print(f"{name:12s} {value:.4f}  (n={n})")
    return 0


def parse_caption(line: str) -> list:
    words = line.lower().split()
    unknown = [w for w in words if w not in WORD_ID]
    if unknown or not words:
        raise ValueError(f"caption {line!r}: unknown words {unknown}" if unknown else "empty caption")
    return [WORD_ID[w] for w in words]


def cmd_synth(args, cfg: RunConfig) -> int:
    from .evaluate import generate_images, write_stage_images

    lines = [l for l in args.captions.read_text().splitlines() if l.strip()]
    captions = [parse_caption(l) for l in lines]
    models = _load_models(cfg, args.checkpoint)
    stages = generate_images(models, captions, cfg.seed, cfg.noise_threshold)
    for k, imgs in enumerate(stages):
        write_stage_images(args.out, k, imgs)
    rows = "".join(f"{k}\t{decode(c)}\n" for k, c in enumerate(captions))
    (args.out / "captions.tsv").write_text(rows)
    _write_manifest(args.out, cfg, artifact="synth", count=len(captions), files=3 * len(captions))
    print(f"wrote {3 * len(captions)} images to {args.out}")
    return 0


def cmd_selftest(args, cfg: RunConfig) -> int:
    from .selftest import run_all

    results = run_all()
    width = max(len(name) for name, _, _ in results)
    for name, ok, detail in results:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
    return 0 if all(ok for _, ok, _ in results) else 2


COMMANDS = {
    "gen-data": cmd_gen_data, "build-memory": cmd_build_memory, "pretrain-damsm": cmd_pretrain,
    "train": cmd_train, "eval": cmd_eval, "synth": cmd_synth, "selftest": cmd_selftest,
}


def _threads(args):
    if args.deterministic:
        return T.deterministic()
    if args.threads:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=args.threads)
    return contextlib.nullcontext()


def run(argv) -> int:
    level = os.environ.get("CPGAN_LOG", "info").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    parser = _parser()
    try:
        args = parser.parse_args(argv)
        cfg = _config(args)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"cpgan: config error: {exc}", file=sys.stderr)
        return 1
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command != "selftest":
            write_effective(cfg, args.out)
    except OSError as exc:
        print(f"cpgan: cannot write to {args.out}: {exc}", file=sys.stderr)
        return 1
    try:
        with _threads(args), T.precision("float32" if cfg.precision == "32" else "float64"):
            return COMMANDS[args.command](args, cfg)
    except (DatasetFormatError, ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"cpgan: invalid input: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report any run failure as status 2
        logger.debug("run failed", exc_info=True)
        print(f"cpgan: {args.command} failed: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()

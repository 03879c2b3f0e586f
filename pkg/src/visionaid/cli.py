"""``visionaid`` command line: train | rank | eval | dump-features.

Hyperparameters live only in the TOML config; flags name files,
directories and resume points (plus a ``--seed`` override).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .bank import BankError, ModelBank, desk_bank
from .config import ConfigError, from_dict, parse_config, write_echo
from .data import DataError, load_dataset, load_images
from .metrics import MetricError, evaluate, metric_features, write_feature_dump
from .networks import Generator, seeded
from .selection import SelectionError, rank_models
from .trainer import RunLockedError, Trainer, build_bank, run_dir_lock
from .training import TrainingError, derive_seed, generate, make_rng

log = logging.getLogger("visionaid")

EXPECTED_ERRORS = (ConfigError, BankError, DataError, MetricError, SelectionError, TrainingError, RunLockedError,
                   FileNotFoundError, ValueError)


def _setup_logging(verbose: bool, logfile: Path | None = None) -> None:
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    if not any(isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler) for h in root.handlers):
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(fmt)
        root.addHandler(h)
    if logfile is not None:
        fh = logging.FileHandler(logfile)
        fh.setFormatter(fmt)
        root.addHandler(fh)


def _latest_checkpoint(run_dir: Path) -> Path | None:
    ckpts = sorted((run_dir / "checkpoints").glob("step_*"))
    return ckpts[-1] if ckpts else None


def cmd_train(args) -> int:
    if args.resume:
        if args.seed is not None or args.warm_start:
            raise ConfigError("--resume cannot be combined with --seed or --warm-start")
        ckpt = Path(args.resume)
        meta = json.loads((ckpt / "state.json").read_text())
        if args.config:
            cfg = parse_config(args.config, echo=False)
            if cfg.to_dict() != meta["config"]:
                raise ConfigError(f"{args.config} differs from the config stored in {ckpt}")
        run_dir = ckpt.parent.parent
        with run_dir_lock(run_dir):
            _setup_logging(args.verbose, run_dir / "train.log")
            trainer = Trainer.resume(ckpt)
            return _run(trainer)
    if not args.config:
        raise ConfigError("train needs --config (or --resume)")
    cfg = parse_config(args.config, echo=False)
    if args.seed is not None:
        cfg = cfg.replace(run={"seed": args.seed})
    run_dir = Path(cfg.run.output_dir)
    with run_dir_lock(run_dir):
        if (run_dir / "events.jsonl").exists() and (run_dir / "events.jsonl").stat().st_size:
            raise ConfigError(f"{run_dir} already holds a run; use --resume or a fresh run.output_dir")
        write_echo(cfg)
        _setup_logging(args.verbose, run_dir / "train.log")
        trainer = Trainer(cfg)
        if args.warm_start:
            trainer.warm_start(args.warm_start)
        return _run(trainer)


def _run(trainer: Trainer) -> int:
    try:
        result = trainer.run()
    except KeyboardInterrupt:
        ckpt = _latest_checkpoint(trainer.out)
        print(f"interrupted at step {trainer.state.step}; resume with --resume {ckpt}", file=sys.stderr)
        return 130
    best = result.best
    log.info("finished at step %d; best FID %.4f at step %d", trainer.state.step, best.fid, best.step)
    if result.report is not None:
        print(json.dumps(result.report.to_dict(), sort_keys=True))
    return 0


def _generator_for(cfg, ckpt: Path | None) -> torch.nn.Module:
    g = cfg.generator
    G = seeded(Generator(g.latent_dim, g.channels, cfg.data.channels, cfg.data.resolution),
               derive_seed(cfg.run.seed, "G") % (2 ** 31))
    if ckpt is not None:
        G.load_state_dict(torch.load(ckpt / "generator.pt", weights_only=True))
    return G.eval()


def cmd_rank(args) -> int:
    cfg = parse_config(args.config, echo=False)
    bank = build_bank(cfg)
    data = load_dataset(cfg.data)
    sel = cfg.selection
    n = min(len(data), sel.max_samples)
    G = _generator_for(cfg, Path(args.ckpt) if args.ckpt else None)
    fake = generate(G, n, cfg.generator.latent_dim, make_rng(cfg.run.seed, "rank"))
    exclude = {cfg.metrics.extractor}
    if cfg.bank.candidates:
        exclude |= set(bank.list_models()) - set(cfg.bank.candidates)
    ranking = rank_models(bank, fake, data, exclude=exclude, split_ratio=sel.split_ratio,
                          seed=derive_seed(cfg.run.seed, "rank") % (2 ** 31), runs=sel.runs, l2=sel.l2,
                          max_samples=sel.max_samples)
    out = Path(args.out) if args.out else Path(cfg.run.output_dir) / "ranking.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for rank, p in enumerate(ranking, 1):
            fh.write(json.dumps({"rank": rank, **p.to_dict()}, sort_keys=True) + "\n")
    print(out)
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    meta = json.loads((ckpt / "state.json").read_text())
    raw = meta["config"]
    raw["data"]["path"] = str(Path(args.data).resolve())
    cfg = from_dict(raw)
    bank = build_bank(cfg)
    data = load_dataset(cfg.data)
    G = _generator_for(cfg, ckpt)
    m = cfg.metrics
    sampler = lambda n: generate(G, n, cfg.generator.latent_dim, make_rng(cfg.run.seed, "final-latents"))
    accs = {v["model_id"]: v["probe"]["val_accuracy"] for v in meta["vision"] if v["probe"]}
    report = evaluate(sampler, data, bank, m.extractor, n_gen=m.n_gen, step=meta["step"],
                      kid_subset_size=min(m.kid_subset_size, len(data), m.n_gen), kid_subsets_n=m.kid_subsets,
                      pr_k=m.pr_k, seed=derive_seed(cfg.run.seed, "kid") % 2 ** 31, probe_accuracies=accs)
    text = json.dumps(report.to_dict(), sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_dump_features(args) -> int:
    if args.manifest:
        bank = ModelBank.from_manifest(args.manifest)
    else:
        bank = desk_bank(args.resolution)
    images = load_images(args.images)
    with torch.no_grad():
        feats = np.concatenate([bank.features(args.model, images[i:i + 256]).flatten().numpy()
                                for i in range(0, len(images), 256)])
    write_feature_dump(args.out, feats)
    print(f"{args.out}: {feats.shape[0]} x {feats.shape[1]} float32")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="visionaid", description="GAN training with frozen pretrained-feature discriminators")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="{train,rank,eval,dump-features}")

    t = sub.add_parser("train", help="train a generator with the vision-aided ensemble")
    t.add_argument("--config")
    t.add_argument("--resume", metavar="CKPT", help="checkpoint directory to continue from")
    t.add_argument("--warm-start", metavar="CKPT", help="baseline checkpoint; skips the warm-up phase")
    t.add_argument("--seed", type=int, help="override run.seed")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rank", help="linear-probe ranking of the bank against generator samples")
    r.add_argument("--config", required=True)
    r.add_argument("--ckpt", help="checkpoint whose generator is probed (default: untrained)")
    r.add_argument("--out", help="report path (default: <output_dir>/ranking.jsonl)")
    r.set_defaults(func=cmd_rank)

    e = sub.add_parser("eval", help="FID, KID, precision and recall for a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump-features", help="write bank features for a folder of images")
    d.add_argument("--model", required=True)
    d.add_argument("--images", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--manifest", help="bank manifest (default: built-in desk bank)")
    d.add_argument("--resolution", type=int, default=32, help="desk bank input resolution")
    d.set_defaults(func=cmd_dump_features)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except EXPECTED_ERRORS as e:
        print(f"visionaid: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

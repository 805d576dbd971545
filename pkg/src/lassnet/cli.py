"""Command-line entry point: ``lassnet {synth-data,train,separate,evaluate,gradcheck}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import datagen, dsp, metrics
from .train import TrainConfig, Trainer, load_model, parse_config_text

log = logging.getLogger("lassnet")


# ---------------------------------------------------------------- config handling

def _add_train_flags(p):
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = type(f.default)
        p.add_argument(flag, dest=f.name, type=kind, default=None, help=f"(default {f.default})")


def resolve_config(args):
    """Defaults < config file < explicit flags."""
    values = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return TrainConfig(**values)


# ---------------------------------------------------------------- subcommands

def cmd_synth_data(args):
    cfg = resolve_config(args)
    corpus = cfg.corpus()
    os.makedirs(os.path.join(args.out, "wav"), exist_ok=True)
    targets = datagen.sample_test_targets(corpus, args.n_targets, args.data_seed)
    manifest = datagen.build_test_set(targets, corpus, args.backgrounds, seed=args.data_seed + 1)
    for entry in manifest:
        rec = datagen.materialize(entry)
        files = {}
        for key, wav in (("mixture", rec.mixture), ("target", rec.target), ("background", rec.background)):
            rel = os.path.join("wav", f"{entry['id']}_{key}.wav")
            dsp.write_wav(os.path.join(args.out, rel), wav)
            files[key] = rel
        entry["files"] = files
    path = os.path.join(args.out, "manifest.jsonl")
    datagen.write_manifest(manifest, path)
    print(f"wrote {len(manifest)} mixtures to {path}")
    return 0


def cmd_train(args):
    if args.resume:
        overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig) if getattr(args, f.name) is not None}
        trainer = Trainer.from_checkpoint(args.resume, **overrides)
    else:
        trainer = Trainer(resolve_config(args))
    os.makedirs(args.out, exist_ok=True)
    log_file = os.path.join(args.out, "train_log.tsv")
    trainer.run(out_dir=args.out, log_file=log_file)
    path = trainer.save(os.path.join(args.out, "final.ckpt"))
    print(path)
    return 0


def _dump_grid(path, grid):
    np.savetxt(path, grid, fmt="%.6g", delimiter="\t")


def cmd_separate(args):
    from .autodiff import no_grad
    from .separator import predict_source

    model = load_model(args.checkpoint)
    mode = model.config.mode
    if args.query is not None and args.tags is not None:
        raise SystemExit("give either --query or --tags, not both")
    if args.query is not None:
        if mode != "text":
            raise SystemExit(f"checkpoint is a {mode}-query model; use --tags")
        query = args.query
    elif args.tags is not None:
        if mode != "tags":
            raise SystemExit(f"checkpoint is a {mode}-query model; use --query")
        query = [t.strip() for t in args.tags.split(",") if t.strip()]
    else:
        raise SystemExit("one of --query or --tags is required")
    wav = dsp.read_wav(args.mixture)
    est = predict_source(wav, query, model, mask_override=1.0 if args.mask_ones else None)
    dsp.write_wav(args.out, est)
    if args.dump_spectrograms:
        os.makedirs(args.dump_spectrograms, exist_ok=True)
        spec = dsp.stft(wav)
        if args.mask_ones:
            mask = np.ones(spec.shape)
        else:
            with no_grad():
                _, m = model.forward(spec.magnitude[None], [query], training=False)
            mask = m.data[0].astype(np.float64)
        _dump_grid(os.path.join(args.dump_spectrograms, "mixture_magnitude.tsv"), spec.magnitude)
        _dump_grid(os.path.join(args.dump_spectrograms, "mask.tsv"), mask)
        _dump_grid(os.path.join(args.dump_spectrograms, "estimate_magnitude.tsv"), mask * spec.magnitude)
    print(args.out)
    return 0


def cmd_evaluate(args):
    from .evaluate import evaluate_testset

    model = load_model(args.checkpoint)
    manifest = datagen.read_manifest(args.manifest)
    report = evaluate_testset(
        model,
        manifest,
        filter_len=args.filter_len,
        caption_mode=args.caption_mode,
        base_dir=os.path.dirname(os.path.abspath(args.manifest)),
        system_name=args.system_name,
    )
    text = metrics.report_to_json(report)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(metrics.report_to_csv(report))
    sys.stdout.write(metrics.report_to_csv(report))
    return 0


def cmd_gradcheck(args):
    from .gradsuite import run_suite

    results = run_suite(seed=args.seed, include_model=not args.ops_only)
    failed = 0
    for r in results:
        status = "ok" if r.ok else "FAIL"
        failed += not r.ok
        print(f"{status:4s} {r.name:32s} rel_err={r.error:.3e} (tol {r.tol:.0e})")
    print(f"{len(results) - failed}/{len(results)} passed")
    return 1 if failed else 0


# ---------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="lassnet", description="Language-queried audio source separation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="materialise a synthetic test set (manifest + WAVs)")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n-targets", type=int, default=50)
    p.add_argument("--backgrounds", type=int, default=5)
    p.add_argument("--data-seed", type=int, default=1234)
    _add_train_flags(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="extract the queried source from a mixture")
    p.add_argument("mixture")
    p.add_argument("--query")
    p.add_argument("--tags", help="comma-separated tag list (tag-query checkpoints)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-ones", action="store_true", help="debug: bypass the network with an all-ones mask")
    p.add_argument("--dump-spectrograms", metavar="DIR", help="write magnitude/mask grids as TSV")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--csv", help="CSV table path")
    p.add_argument("--filter-len", type=int, default=512)
    p.add_argument("--caption-mode", choices=("seen", "heldout"), default="seen")
    p.add_argument("--system-name", default="Model")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and a toy model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops-only", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

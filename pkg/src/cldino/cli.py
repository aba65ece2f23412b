"""``cldino`` command line: corpus generation, training, fine-tuning, evaluation, analysis.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_value
from .corpus import Manifest, TrialList, generate_corpus, make_trials
from .curriculum import emit_schedule_trace, preset
from .encoder import Encoder, load_checkpoint
from .errors import ConfigError
from .schedule import LrConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _overrides(args) -> dict:
    out = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v.strip())
    return out


def _run_config(args, extra: dict) -> RunConfig:
    if getattr(args, "workers", 1) != 1:
        raise ConfigError(f"--workers {args.workers}: only single-process execution is supported")
    extra = {**extra, "train.deterministic": getattr(args, "deterministic", None)}
    over = {k: v for k, v in extra.items() if v is not None}
    over.update(_overrides(args))
    if getattr(args, "preset", None):
        over["preset"] = args.preset
    return RunConfig.load(getattr(args, "config", None), over)


def _manifest(path) -> Manifest:
    if path is None:
        raise ConfigError("a manifest is required (--manifest)")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"manifest not found: {p}")
    return Manifest.read(p)


# ---------------------------------------------------------------------------
# commands


def cmd_make_corpus(args) -> int:
    if args.speakers < 2 or args.utts < 2:
        raise ConfigError("need at least 2 speakers and 2 utterances per speaker")
    out = Path(args.out)
    m = generate_corpus(args.speakers, args.utts, (args.dur_min, args.dur_max), args.seed, out,
                        prefix=args.prefix)
    same = args.speakers * args.utts * (args.utts - 1) // 2
    total = len(m) * (len(m) - 1) // 2
    n_t = min(args.n_target, same)
    n_n = min(args.n_nontarget, total - same)
    trials = make_trials(m, n_t, n_n, seed=args.seed)
    trials.write(out / "trials.txt")
    print(f"wrote {len(m)} utterances from {args.speakers} speakers to {out / 'manifest.jsonl'}; "
          f"{len(trials)} trials ({trials.n_target} target) to {out / 'trials.txt'}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = _run_config(args, {"curriculum.data": args.curriculum_data,
                            "curriculum.aug": args.curriculum_aug,
                            "train.epochs": args.epochs, "seed": args.seed})
    cfg, enc_cfg = rc.train(), rc.encoder()
    manifest = _manifest(args.manifest)
    resume = load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.dump(out / "config.toml")
    data, aug = cfg.courses()
    emit_schedule_trace(data, aug, cfg.lr, cfg.epochs, out / "schedule.csv")

    from .training import train_ssl

    trainer = train_ssl(manifest, cfg, enc_cfg, out, resume=resume)
    last = trainer.history[-1]
    print(json.dumps({"epochs": trainer.epoch, "final_loss": last.loss,
                      "center_max_prob": last.center_max_prob,
                      "checkpoint": str(out / "last.ckpt")}))
    return EXIT_OK


def cmd_finetune(args) -> int:
    rc = _run_config(args, {"finetune.epochs": args.epochs, "seed": args.seed})
    cfg = rc.finetune()
    manifest = _manifest(args.manifest)
    if args.label_fraction < 1.0:
        from .curriculum import epoch_subset

        manifest = manifest.subset(epoch_subset(manifest, args.label_fraction, "fixed_speakers",
                                                rc["seed"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.dump(out / "config.toml")
    init = "random" if args.init == "random" else load_checkpoint(args.init)
    from .training import finetune

    res = finetune(init, manifest, cfg, rc.encoder() if args.init == "random" else None, out)
    print(json.dumps({"epochs": len(res.history), "final_loss": res.history[-1]["loss"],
                      "train_accuracy": res.history[-1]["accuracy"],
                      "checkpoint": str(out / "finetuned.ckpt")}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate

    trials_path = Path(args.trials)
    if not trials_path.exists():
        raise ConfigError(f"trial list not found: {trials_path}")
    manifest = _manifest(args.manifest or trials_path.parent / "manifest.jsonl")
    rc = _run_config(args, {})
    ckpt = load_checkpoint(args.ckpt)
    encoder = Encoder(ckpt.encoder_config)
    encoder.load_state_dict(ckpt.encoder)
    report = evaluate(encoder, manifest, TrialList.read(trials_path), rc.frontend(),
                      rc["eval.p_target"], args.out, args.scores)
    print(json.dumps(report))
    return EXIT_OK


def cmd_schedule(args) -> int:
    lr = LrConfig(lr_max=args.lr_max, restart_period=args.block, decay=args.decay).validate()
    text = emit_schedule_trace(preset(args.data, args.block), preset(args.aug, args.block), lr,
                               args.epochs, args.out)
    if args.out is None:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_cluster_select(args) -> int:
    from .selection import cluster_manifest, coverage_table, write_coverage_csv

    manifest = _manifest(args.manifest)
    if not manifest.has_labels:
        raise ConfigError("cluster-select reports speaker coverage and needs a labelled manifest")
    embeddings = None
    if args.ckpt:
        from .evaluation import embed_manifest

        ckpt = load_checkpoint(args.ckpt)
        enc = Encoder(ckpt.encoder_config)
        enc.load_state_dict(ckpt.encoder)
        emb = embed_manifest(enc, manifest)
        embeddings = np.stack([emb[u] for u in manifest.ids])
    result = cluster_manifest(manifest, args.k, seed=args.seed, embeddings=embeddings)
    props = args.proportions or [round(0.1 * i, 1) for i in range(1, 11)]
    text = write_coverage_csv(coverage_table(result, manifest, props, args.seed), args.out)
    if args.out is None:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import format_table, gradient_suite

    rows = gradient_suite(range(args.seeds), eps=args.eps,
                          desk_entries=0 if args.no_desk else args.desk_entries)
    print(format_table(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_RUNTIME


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cldino", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(sp):
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--preset", choices=["paper", "desk"])
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key, e.g. --set train.batch_size=16")
        sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="fixed-order reductions and no wall-clock fields (default on)")
        sp.add_argument("--workers", type=int, default=1,
                        help="worker processes; only 1 is supported, so reductions always "
                             "run in a fixed order")

    sp = sub.add_parser("make-corpus", help="generate a synthetic speaker corpus and trial list")
    sp.add_argument("--speakers", type=int, default=20)
    sp.add_argument("--utts", type=int, default=40)
    sp.add_argument("--dur-min", type=float, default=2.0)
    sp.add_argument("--dur-max", type=float, default=4.0)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--prefix", default="", help="prepended to speaker ids, e.g. ev")
    sp.add_argument("--n-target", type=int, default=500)
    sp.add_argument("--n-nontarget", type=int, default=500)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_make_corpus)

    sp = sub.add_parser("train", help="self-supervised training with optional curricula")
    config_args(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--curriculum-data", choices=["none", "CL_D1", "CL_D2", "CL_D3"])
    sp.add_argument("--curriculum-aug", choices=["none", "CL_A1", "CL_A2"])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune", help="supervised AAM-softmax fine-tuning")
    config_args(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--init", default="random", help="'random' or a checkpoint path")
    sp.add_argument("--label-fraction", type=float, default=1.0)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("evaluate", help="EER and minDCF of a checkpoint on a trial list")
    config_args(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--trials", required=True)
    sp.add_argument("--manifest", help="defaults to manifest.jsonl next to the trial list")
    sp.add_argument("--out", help="write the JSON report here")
    sp.add_argument("--scores", help="dump 'utt_a utt_b score label' lines here")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("schedule", help="per-epoch curriculum and learning-rate trace (CSV)")
    sp.add_argument("--data", default="none")
    sp.add_argument("--aug", default="none")
    sp.add_argument("--epochs", type=int, default=80)
    sp.add_argument("--block", type=int, default=16, help="restart period / course block length")
    sp.add_argument("--lr-max", type=float, default=0.001)
    sp.add_argument("--decay", type=float, default=0.8)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_schedule)

    sp = sub.add_parser("cluster-select", help="speaker coverage of k-means cluster selections")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--k", type=int, default=40)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--proportions", type=float, nargs="+")
    sp.add_argument("--ckpt", help="cluster model embeddings instead of MFCC statistics")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_cluster_select)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--desk-entries", type=int, default=3,
                    help="entries sampled per tensor of the full-size encoder")
    sp.add_argument("--no-desk", action="store_true", help="skip the full-size encoder")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

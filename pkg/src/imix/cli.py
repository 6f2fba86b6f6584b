"""Command-line front door.

Subcommands: pretrain, linear-eval, fed, export-embeddings, synth-data,
verify. Configs are flat `key=value` text (dotted keys); command-line
`--set key=value` overrides win over the file. Metrics are append-only
JSON lines; outputs of identical invocations are byte-identical.

Exit codes: 0 success, 1 validation error, 2 runtime/numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (SplitSpec, load_with_manifest, split, standardize,
                   synth_blobs, write_manifest)
from .errors import (ConfigError, DataError, LabelError, NumericError,
                     ShapeError, UsageError)
from .evaluation import export_embeddings, extract, fed
from .mathcore import Rng
from .trainer import (config_from_sources, resolved_text, run_eval, run_id,
                      run_pretext)
from . import verify as verify_mod

OUT_ROOT_ENV = "IMIX_OUT_ROOT"
METRICS_SCHEMA = 1


def _metrics_record(run: str, stage: str, epoch: int, **fields) -> str:
    rec = {"v": METRICS_SCHEMA, "run": run, "stage": stage, "epoch": epoch}
    rec.update(fields)
    return json.dumps(rec, sort_keys=True)


def _prepare_single(path: str, train_frac: float, seed: int, normalize: bool):
    ds = load_with_manifest(path)
    train, test = split(ds, SplitSpec(train_frac, seed))
    if normalize:
        train, stats = standardize(train)
        test, _ = standardize(test, stats)
    return train, test


def _prepare_pair(train_path: str, test_path: str, normalize: bool):
    train = load_with_manifest(train_path)
    test = load_with_manifest(test_path)
    if normalize:
        train, stats = standardize(train)
        test, _ = standardize(test, stats)
    return train, test


def _eval_datasets(args):
    if args.train_data and args.test_data:
        return _prepare_pair(args.train_data, args.test_data, args.normalize)
    if args.data:
        return _prepare_single(args.data, args.split_train, args.split_seed,
                               args.normalize)
    raise ConfigError("provide --data or both --train-data and --test-data")


def cmd_pretrain(args) -> int:
    cfg = config_from_sources(args.config, args.set or (), args.preset)
    if not cfg.data_path:
        raise ConfigError("config needs data.path (the pretext CSV)")
    out_dir = args.out or os.path.join(
        os.environ.get(OUT_ROOT_ENV, "runs"), f"run-{run_id(cfg)}")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved.cfg"), "w", encoding="utf-8") as fh:
        fh.write(resolved_text(cfg))

    train, _ = _prepare_single(cfg.data_path, cfg.split_train, cfg.split_seed,
                               cfg.data_normalize)
    rid = run_id(cfg)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    ckpt_path = os.path.join(out_dir, "checkpoint.json")
    with open(metrics_path, "w", encoding="utf-8") as mfh:
        def on_metrics(rec):
            mfh.write(_metrics_record(rid, "pretext", rec.epoch,
                                      loss=rec.loss, lr=rec.lr) + "\n")

        def on_checkpoint(state, epoch):
            save_checkpoint(ckpt_path, state,
                            meta={"run_id": rid, "epoch": epoch})

        result = run_pretext(cfg, train, checkpoint_hook=on_checkpoint,
                             metrics_hook=on_metrics)
    if cfg.epochs == 0:
        save_checkpoint(ckpt_path, result.state, meta={"run_id": rid, "epoch": 0})
    final = result.metrics[-1].loss if result.metrics else float("nan")
    print(f"run {rid}: {result.steps} steps, final loss {final:.6f}")
    print(out_dir)
    return 0


def cmd_linear_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    train, test = _eval_datasets(args)
    res = run_eval(state, train, test, probe=args.probe, space=args.space,
                   with_fed=args.fed, probe_seed=args.probe_seed)
    print(f"{res['top1']:.4f}")
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    with open(args.checkpoint, encoding="utf-8") as fh:
        rid = json.load(fh).get("meta", {}).get("run_id", "adhoc")
    fields = {"top1": res["top1"], "train_top1": res["train_top1"],
              "probe": res["probe"], "space": res["space"]}
    if "fed" in res:
        fields["fed"] = res["fed"]
    with open(metrics_path, "a", encoding="utf-8") as fh:
        fh.write(_metrics_record(rid, "linear_eval", 0, **fields) + "\n")
    return 0


def cmd_fed(args) -> int:
    state = load_checkpoint(args.checkpoint)
    train, test = _eval_datasets(args)
    f_tr = extract(state, train.features, args.space)
    f_te = extract(state, test.features, args.space)
    value = fed(f_tr, f_te)
    print(f"{value:.10g} {value * 1e4:.10g}")
    return 0


def cmd_export_embeddings(args) -> int:
    state = load_checkpoint(args.checkpoint)
    ds = load_with_manifest(args.data)
    if args.normalize:
        ds, _ = standardize(ds)
    feats = extract(state, ds.features, args.space)
    export_embeddings(feats, ds.labels, args.out)
    print(args.out)
    return 0


def cmd_synth_data(args) -> int:
    rng = Rng(args.seed)
    ds = synth_blobs(rng, args.n, args.classes, args.d_signal, args.d_noise,
                     args.sep)
    header = [f"x{i}" for i in range(ds.dim)] + ["label"]
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(ds.n):
            cells = [repr(v) for v in ds.features[i].tolist()]
            cells.append(str(int(ds.labels[i])))
            fh.write(",".join(cells) + "\n")
    write_manifest(args.out, "label", spatial=(), n_classes=ds.n_classes)
    print(args.out)
    return 0


def cmd_verify(args) -> int:
    results = verify_mod.run_checks(only=args.only or None,
                                    loss_bias=args.loss_bias)
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += 0 if ok else 1
    print(f"{len(results) - failed} passed, {failed} failed")
    return 0 if failed == 0 else 2


def _add_eval_data_args(p):
    p.add_argument("--data", help="single CSV, split into train/test")
    p.add_argument("--train-data", help="training-side CSV")
    p.add_argument("--test-data", help="test-side CSV")
    p.add_argument("--split-train", type=float, default=0.8)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--normalize", action="store_true",
                   help="standardize features with training-side statistics")
    p.add_argument("--space", choices=("backbone", "projection"),
                   default="backbone")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imix",
        description="Contrastive pretext training with instance mixing, "
                    "linear-probe evaluation, and embedding diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run the pretext training stage")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--preset", choices=("desk", "tabular"))
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--out", help=f"output directory (default ${OUT_ROOT_ENV}/run-<id>)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("linear-eval", help="probe a frozen checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_eval_data_args(p)
    p.add_argument("--probe", choices=("pinv", "sgd"), default="pinv")
    p.add_argument("--probe-seed", type=int, default=0)
    p.add_argument("--fed", action="store_true",
                   help="also record the train/test embedding distance")
    p.add_argument("--out", help="directory for the metrics line")
    p.set_defaults(func=cmd_linear_eval)

    p = sub.add_parser("fed", help="Frechet distance between train/test embeddings")
    p.add_argument("--checkpoint", required=True)
    _add_eval_data_args(p)
    p.set_defaults(func=cmd_fed)

    p = sub.add_parser("export-embeddings", help="dump eval-mode features to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--space", choices=("backbone", "projection"),
                   default="backbone")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("synth-data", help="generate a Gaussian-cluster benchmark CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--d-signal", type=int, default=16)
    p.add_argument("--d-noise", type=int, default=16)
    p.add_argument("--sep", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--only", action="append", metavar="CHECK",
                   help="run only the named check (repeatable)")
    p.add_argument("--loss-bias", type=float, default=0.0,
                   help=argparse.SUPPRESS)  # harness hook for self-tests
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, LabelError, ShapeError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

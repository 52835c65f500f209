"""Command-line front end: ``mvcl <command> [options]``.

Exit status: 0 ok, 2 usage, 3 config, 4 data format, 5 failed check.
"""

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import certify
from .clustering import aggregate_many, kmeans, match_labels, nmi
from .config import CliConfig, apply_overrides, dump_config, load_config
from .errors import ConfigError, DataFormatError, MvclError, WorkerError
from .parallel import benchmark_scaling, checks_csv, scaling_csv
from .pipeline import (
    encode,
    evaluate,
    generate_synthetic,
    infer,
    params_from_json,
    params_to_json,
    read_dataset,
    read_truth_csv,
    train,
    write_dataset,
    write_truth_csv,
)
from .textbank import build_anchors, default_prompt_bank, load_prompt_bank

log = logging.getLogger("mvcl")

EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = 2, 3, 4, 5
FD_TOLERANCE = 1e-6

DATASET_FILE = "dataset.mvlm"
TRUTH_FILE = "truth.csv"


class CheckFailed(Exception):
    pass


# ------------------------------------------------------------------ config


def effective_config(args, env=None):
    """Defaults, then the config file, then MVCL_WORKERS, then flags."""
    env = os.environ if env is None else env
    cfg = load_config(args.config) if args.config else CliConfig()
    pairs = []
    if env.get("MVCL_WORKERS"):
        pairs.append(("train.workers", env["MVCL_WORKERS"]))
    flag_keys = {
        "seed": "seed",
        "out": "paths.out",
        "data": "paths.data",
        "params": "paths.params",
        "epochs": "train.epochs",
        "workers": "train.workers",
        "batch": "train.batch_subjects",
        "tau": "loss.tau",
        "neg_sign": "loss.neg_sign",
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            pairs.append((key, str(value)))
    for item in args.set or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs.append((key.strip(), raw))
    cfg = apply_overrides(cfg, pairs)
    cfg.train_config()  # validate the cross-section invariants early
    cfg.synthetic_spec()
    return cfg


def _out(cfg):
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_dir(cfg):
    return Path(cfg.paths.data or cfg.paths.out)


def _params_path(cfg):
    return Path(cfg.paths.params) if cfg.paths.params else Path(cfg.paths.out) / "params.json"


def _anchors(cfg):
    bank = load_prompt_bank(cfg.text.prompts) if cfg.text.prompts else default_prompt_bank()
    return build_anchors(bank, cfg.synthetic.dim_embed, cfg.text.seed)


def _load_dataset(cfg):
    """The snapshot under the data directory; generated in memory when absent."""
    d = _data_dir(cfg)
    path = d / DATASET_FILE
    if not path.exists():
        log.info("no %s; generating the synthetic dataset in memory", path)
        return generate_synthetic(cfg.synthetic_spec())
    truth = read_truth_csv(d / TRUTH_FILE) if (d / TRUTH_FILE).exists() else None
    return read_dataset(path, truth)


def _split(cfg, ds):
    """(train, held-out); everything is training data when truth is unknown."""
    if cfg.eval.holdout_per_class <= 0 or np.any(ds.truth < 0):
        return ds, ds.subset([])
    return ds.split(cfg.eval.holdout_per_class, seed=cfg.seed)


def _load_params(cfg):
    path = _params_path(cfg)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read params {path}: {exc.strerror}") from None
    return params_from_json(text)


def _write(path, text):
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def _fmt(x):
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.4f}"


def _json_float(x):
    return None if isinstance(x, float) and math.isnan(x) else x


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg, args):
    out = _out(cfg)
    ds = generate_synthetic(cfg.synthetic_spec())
    write_dataset(out / DATASET_FILE, ds)
    write_truth_csv(out / TRUTH_FILE, ds)
    print(f"wrote {len(ds)} subjects x 3 views to {out / DATASET_FILE}")


def cmd_train(cfg, args):
    out = _out(cfg)
    anchors = _anchors(cfg)
    ds = _load_dataset(cfg)
    train_ds, test_ds = _split(cfg, ds)
    report, params = train(train_ds, anchors, cfg.train_config())
    _write(_params_path(cfg), params_to_json(params))
    lines = [json.dumps({"epoch": i, **r.as_dict()}) for i, r in enumerate(report.epochs)]
    _write(out / "train.jsonl", "".join(line + "\n" for line in lines))
    summary = {
        "epochs": len(report.epochs),
        "train_subjects": len(train_ds),
        "train_accuracy": _json_float(report.accuracy),
        "train_nmi": _json_float(report.nmi),
    }
    if len(test_ds):
        acc, score = evaluate(params, test_ds, anchors)
        summary.update(heldout_subjects=len(test_ds), heldout_accuracy=acc, heldout_nmi=score)
    _write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")

    print(f"{'epoch':>5}  {'total':>10}  {'contrast':>10}  {'consist':>10}  {'pos':>10}  {'neg':>10}  {'sec':>7}")
    for i, (r, sec) in enumerate(zip(report.epochs, report.seconds)):
        print(
            f"{i:>5}  {r.total:>10.5f}  {r.contrastive:>10.5f}  {r.consistency:>10.5f}"
            f"  {r.positive:>10.5f}  {r.negative:>10.5f}  {sec:>7.3f}"
        )
    for key in sorted(summary):
        v = summary[key]
        print(f"{key}: {_fmt(v) if isinstance(v, float) else v}")


def cmd_eval(cfg, args):
    ds = _load_dataset(cfg)
    if np.any(ds.truth < 0):
        raise DataFormatError(f"eval needs {TRUTH_FILE} covering every subject")
    _, test_ds = _split(cfg, ds)
    target = ds if args.all or not len(test_ds) else test_ds
    acc, score = evaluate(_load_params(cfg), target, _anchors(cfg))
    print(f"subjects: {len(target)}")
    print(f"accuracy: {acc:.6f}")
    print(f"nmi: {score:.6f}")


def cmd_infer(cfg, args):
    ds = _load_dataset(cfg)
    hits = np.flatnonzero(ds.subject_ids == args.id)
    if not hits.size:
        raise DataFormatError(f"subject id {args.id} is not in the snapshot")
    anchors = _anchors(cfg)
    label, scores = infer(_load_params(cfg), ds.features[hits[0]], anchors)
    print(f"class: {label}")
    for cls, s in zip(anchors.classes, scores):
        print(f"  {cls:<10} {s: .6f}")


def cmd_cluster(cfg, args):
    out = _out(cfg)
    ds = _load_dataset(cfg)
    k = len(_anchors(cfg).classes)
    if _params_path(cfg).exists():
        emb = encode(_load_params(cfg), ds.features.reshape(-1, ds.features.shape[2]))
        points = aggregate_many(emb.reshape(len(ds), 3, -1))
    else:
        log.info("no params file; clustering the mean raw view features")
        points = ds.features.mean(axis=1)
    t = cfg.train
    model = kmeans(points, k, seed=cfg.seed, max_iters=t.kmeans_iters, tol=t.kmeans_tol, n_init=t.kmeans_restarts)
    rows = "".join(f"{int(s)},{int(c)}\n" for s, c in zip(ds.subject_ids, model.labels))
    _write(out / "assignments.csv", "subject_id,cluster\n" + rows)
    print(f"clusters: {k}  inertia: {model.inertia:.6f}  iterations: {model.iterations}")
    if np.all(ds.truth >= 0):
        pred = {int(s): int(c) for s, c in zip(ds.subject_ids, model.labels)}
        truth = {int(s): int(c) for s, c in zip(ds.subject_ids, ds.truth)}
        if k <= 8 and len(set(truth.values())) <= 8:
            print(f"matched accuracy: {match_labels(pred, truth, k):.6f}")
        print(f"nmi: {nmi(pred, truth):.6f}")


def cmd_gradcheck(cfg, args):
    if args.full:
        plan = certify.certification_plan(200, cfg.seed)
    else:
        plan = [(cfg.seed, args.n, args.d, cfg.loss.tau, cfg.loss)]
    workers = cfg.train.workers if args.workers is not None or os.environ.get("MVCL_WORKERS") else 1
    worst = certify.run_certification(plan, args.step, workers)
    print(f"configurations: {len(plan)}")
    for term in certify.TERMS:
        print(f"{term:<14} {worst[term].format()}")
    top = max(r.max_rel_error for r in worst.values())
    print(f"max_rel_error: {top:.3e}")
    if not top <= FD_TOLERANCE:
        raise CheckFailed(f"max_rel_error {top:.3e} exceeds {FD_TOLERANCE:g}")


def cmd_bench(cfg, args):
    out = _out(cfg)
    b = cfg.bench
    spec = replace(cfg.synthetic_spec(), subjects_per_class=b.subjects_per_class)
    ds = generate_synthetic(spec)
    workers = tuple(range(1, args.workers + 1)) if args.workers is not None else b.workers
    batches = (args.batch,) if args.batch is not None else b.batches
    rows = benchmark_scaling(
        ds, _anchors(cfg), cfg.train_config(), workers, batches, args.repeats or b.repeats, cfg.train.backend
    )
    _write(out / "scaling.csv", scaling_csv(rows))
    _write(out / "bench_checks.csv", checks_csv(rows))
    print(f"{'workers':>7}  {'batch':>5}  {'seconds':>9}  {'speedup':>7}")
    for r in rows:
        print(f"{r.workers:>7}  {r.batch:>5}  {r.seconds:>9.4f}  {r.speedup:>7.3f}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "write a synthetic dataset snapshot and truth CSV"),
    "train": (cmd_train, "train the encoder; writes params, per-epoch JSON lines and a summary"),
    "eval": (cmd_eval, "matched accuracy and nmi of anchor predictions"),
    "infer": (cmd_infer, "predict the class of one subject in the snapshot"),
    "cluster": (cmd_cluster, "k-means over aggregated embeddings; writes assignments.csv"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every analytic gradient"),
    "bench": (cmd_bench, "data-parallel scaling benchmark; writes scaling.csv"),
}


# ------------------------------------------------------------------ parser


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat 'section.key = value' config file")
    common.add_argument("--seed", type=_u64, help="master seed")
    common.add_argument("--out", metavar="DIR", help="output directory (default: out)")
    common.add_argument("--data", metavar="DIR", help="directory holding dataset.mvlm / truth.csv (default: --out)")
    common.add_argument("--params", metavar="PATH", help="params file (default: <out>/params.json)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--epochs", type=int)
    training.add_argument("--workers", type=int, help="data-parallel workers (default: $MVCL_WORKERS)")
    training.add_argument("--batch", type=int, help="subjects per batch")
    training.add_argument("--tau", type=float, help="softmax temperature")
    training.add_argument("--neg-sign", choices=("corrected", "paper_literal"))

    parser = argparse.ArgumentParser(prog="mvcl", description="Multiview contrastive expression learning toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    p = {}
    for name, (_, help_text) in COMMANDS.items():
        parents = [common, training] if name in ("train", "bench", "gradcheck") else [common]
        p[name] = sub.add_parser(name, parents=parents, help=help_text, description=help_text)
    p["eval"].add_argument("--all", action="store_true", help="evaluate every subject, not just the held-out split")
    p["infer"].add_argument("--id", type=int, required=True, help="subject id in the snapshot")
    p["gradcheck"].add_argument("--n", type=int, default=8, help="batch size N")
    p["gradcheck"].add_argument("--d", type=int, default=16, help="embedding dim d")
    p["gradcheck"].add_argument("--step", type=float, default=certify.CERTIFY_STEP, help="central-difference step")
    p["gradcheck"].add_argument("--full", action="store_true", help="run the 200-configuration certification grid")
    p["bench"].add_argument("--repeats", type=int, help="timed repetitions per cell (median is kept)")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors, naming the flag
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "bench" and args.workers is not None and args.workers < 1:
        parser.error("--workers must be >= 1")
    if args.command == "gradcheck" and not 1e-6 <= args.step <= 1e-3:
        parser.error(f"--step must lie in [1e-6, 1e-3], got {args.step:g}")
    try:
        cfg = effective_config(args)
        out = Path(cfg.paths.out)
        if args.command in ("gen-data", "train", "cluster", "bench"):
            _out(cfg)
            _write(out / "config.txt", dump_config(cfg))
        COMMANDS[args.command][0](cfg, args)
    except ConfigError as exc:
        print(f"mvcl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"mvcl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckFailed as exc:
        print(f"mvcl: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (MvclError, WorkerError) as exc:
        print(f"mvcl: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``viser {search,bench,gen,contour,eval}``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment, metrics, model, synthetic
from .embedding import Corpus, check_same_dim, load_corpus, save_corpus
from .errors import ViserError
from .neighbor_search import SearchParams, exact_search, recall_at_k, search, write_matches
from .perturbation import PerturbationConfig

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

REG_TO_METHOD = {"none": "cross_entropy", "dropout": "dropout", "at": "at", "vat": "vat", "viser": "viser"}


def _fmt_pct(x: float) -> str:
    return f"{x:.6g}%"


# --- search ------------------------------------------------------------------


def cmd_search(args) -> int:
    labeled = load_corpus(args.labeled)
    unlabeled = load_corpus(args.unlabeled)
    check_same_dim(labeled, unlabeled)
    params = SearchParams(args.km, args.kr, args.shards)
    if args.oracle:
        result = exact_search(labeled, unlabeled, args.kr)
    else:
        stats: dict = {}
        result = search(labeled, unlabeled, params, workers=args.workers, stats=stats)
    if args.out:
        write_matches(result, args.out, args.format)
    n = sum(len(v) for v in result.values())
    print(f"{n} matches for {len(result)} labeled ids")
    if args.verify:
        oracle = result if args.oracle else exact_search(labeled, unlabeled, args.kr)
        print(f"agreement: {_fmt_pct(100.0 * recall_at_k(result, oracle))}")
    return 0


# --- bench -------------------------------------------------------------------


def _load_config_file(path) -> dict:
    p = Path(path)
    if p.suffix == ".toml":
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    return json.loads(p.read_text(encoding="utf-8"))


def bench_config(args) -> experiment.ExperimentConfig:
    """Defaults, then the config file, then explicit flags."""
    cfg = experiment.ExperimentConfig()
    if args.config:
        base = cfg.to_dict()
        for key, val in _load_config_file(args.config).items():
            if isinstance(val, dict) and isinstance(base.get(key), dict):
                base[key].update(val)
            else:
                base[key] = val
        cfg = experiment.ExperimentConfig.from_dict(base)
    if args.reg:
        cfg = replace(cfg, methods=tuple(REG_TO_METHOD[r] for r in args.reg))
    if args.seeds is not None:
        cfg = replace(cfg, seeds=tuple(range(args.seed_start, args.seed_start + args.seeds)))
    elif args.seed_start:
        cfg = replace(cfg, seeds=tuple(s + args.seed_start for s in cfg.seeds))
    pert = {}
    if args.xi is not None:
        pert["xi"] = args.xi
    if args.power_iters is not None:
        pert["power_iters"] = args.power_iters
    if args.vat_grad is not None:
        pert["grad"] = args.vat_grad
    at_eps = args.at_eps if args.at_eps is not None else args.eps
    vat_eps = args.vat_eps if args.vat_eps is not None else args.eps
    cfg = replace(
        cfg,
        at=replace(cfg.at, **({"epsilon": at_eps} if at_eps is not None else {})),
        vat=replace(cfg.vat, **pert, **({"epsilon": vat_eps} if vat_eps is not None else {})),
    )
    train = {}
    for flag, name in (("lr", "learning_rate"), ("iterations", "iterations"), ("batch_size", "batch_size"),
                       ("dropout_p", "dropout_p")):
        if getattr(args, flag) is not None:
            train[name] = getattr(args, flag)
    if "iterations" in train and args.decay_steps is None:
        n = train["iterations"]
        train["decay_steps"] = tuple(s for s in (int(0.6 * n), int(0.8 * n)) if 0 < s < n)
    if args.decay_steps is not None:
        train["decay_steps"] = tuple(args.decay_steps)
    if train:
        cfg = replace(cfg, train=model.TrainConfig(**{**cfg.to_dict()["train"], **train}))
    viser = {}
    if args.take is not None:
        viser["take"] = args.take
    if args.restart:
        viser["restart"] = True
    if args.km is not None:
        viser["k_m"] = args.km
    if args.kr is not None:
        viser["k_r"] = args.kr
    if viser:
        cfg = replace(cfg, viser=replace(cfg.viser, **viser))
    if args.weight is not None:
        cfg = replace(cfg, adversarial_weight=args.weight)
    return cfg


def cmd_bench(args) -> int:
    cfg = bench_config(args)

    def progress(r):
        if not args.quiet:
            cells = "  ".join(f"{m}={e:.1f}" for m, e in r.errors.items())
            print(f"seed {r.seed}: {cells}", file=sys.stderr, flush=True)

    workers = args.workers or experiment.thread_cap()
    record = experiment.run_benchmark(cfg, workers=workers, progress=progress)
    path = experiment.save_record(record, args.out_dir, force=args.force)
    for m, a in record.aggregate.items():
        print(f"{m:<14} {a['mean']:.3f} +- {a['std']:.3f}  (n={a['n']})")
    print(f"record: {path}")
    return 0


# --- gen / contour -------------------------------------------------------------


def _spec(args) -> synthetic.SyntheticSpec:
    return synthetic.SyntheticSpec(
        modes_per_class=args.modes_per_class, n_unlabeled=args.n_unlabeled,
        n_test=args.n_test, ambient_dim=args.ambient_dim, seed=args.seed,
    )


def cmd_gen(args) -> int:
    ds = synthetic.generate(_spec(args))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".bin" if args.format == "binary" else ".jsonl"
    for name in ("train", "unlabeled", "test"):
        split = getattr(ds, name)
        ids = np.arange(len(split), dtype=np.uint64)
        labels = None if name == "unlabeled" else [(int(c),) for c in split.cls]
        if args.format == "binary":
            labels = None
        save_corpus(Corpus(ids, split.x, labels), out / f"{name}{ext}", args.format)
    if args.format == "binary":
        for name in ("train", "test"):
            split = getattr(ds, name)
            np.savetxt(out / f"{name}_labels.csv", split.cls, fmt="%d")
    print(f"wrote {len(ds.train)} train, {len(ds.unlabeled)} unlabeled, {len(ds.test)} test to {out}")
    return 0


def write_grid_csv(grid: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        for row in grid:
            w.writerow([repr(float(v)) for v in row])


def cmd_contour(args) -> int:
    method = REG_TO_METHOD.get(args.method, args.method)
    cfg = experiment.ExperimentConfig(spec=replace(_spec(args), seed=args.seed))
    if args.lr is not None:
        cfg = replace(cfg, train=replace(cfg.train, learning_rate=args.lr))
    if args.params:
        ds = synthetic.generate(cfg.spec)
        params = model.load_params(args.params)
    else:
        ds, results, _ = experiment.train_methods(cfg, args.seed, [method])
        params = results[method].params
    grid = synthetic.contour_grid(lambda X: model.predict_proba(params, X)[:, 0], ds, args.resolution)
    write_grid_csv(grid, args.out)
    print(f"{args.resolution}x{args.resolution} grid -> {args.out}")
    return 0


# --- eval ----------------------------------------------------------------------


def read_predictions(path) -> list[metrics.PredictionRecord]:
    recs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                scores = np.asarray(obj["scores"], dtype=np.float64)
                truth = np.asarray(obj["truth"], dtype=np.int64)
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: bad prediction record ({exc})") from None
            if scores.shape != truth.shape or not np.all(np.isfinite(scores)):
                raise ValueError(f"{path}: line {lineno}: scores and truth must be equal-length and finite")
            points = {int(k): tuple(v) for k, v in obj.get("points", {}).items()}
            boxes = {int(k): [tuple(b) for b in v] for k, v in obj.get("boxes", {}).items()}
            recs.append(metrics.PredictionRecord(scores, truth, points, boxes))
    return recs


def cmd_eval(args) -> int:
    report = metrics.evaluation_report(read_predictions(args.predictions), args.tolerance)
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# --- parser --------------------------------------------------------------------


def _add_spec_flags(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--modes-per-class", type=int, default=8)
    p.add_argument("--n-unlabeled", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--ambient-dim", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viser", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="top-k regularizer-sample search between two embedding corpora")
    p.add_argument("--labeled", required=True)
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--km", type=int, default=1000)
    p.add_argument("--kr", type=int, default=10)
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--format", choices=["jsonl", "csv"], help="default: from the --out suffix")
    p.add_argument("--oracle", action="store_true", help="exhaustive search instead of the sharded one")
    p.add_argument("--verify", action="store_true", help="also run the exhaustive search and report agreement")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("bench", help="synthetic benchmark over many seeds")
    p.add_argument("--config", help="TOML or JSON experiment config; flags override it")
    p.add_argument("--reg", nargs="+", choices=sorted(REG_TO_METHOD), help="methods to run (none = cross-entropy)")
    p.add_argument("--seeds", type=int, help="number of seeds")
    p.add_argument("--seed-start", type=int, default=0)
    p.add_argument("--eps", type=float, help="epsilon for both AT and VAT")
    p.add_argument("--at-eps", type=float)
    p.add_argument("--vat-eps", type=float)
    p.add_argument("--xi", type=float)
    p.add_argument("--power-iters", type=int)
    p.add_argument("--vat-grad", choices=["analytic", "fd"])
    p.add_argument("--weight", type=float, help="weight of the perturbed loss term")
    p.add_argument("--take", type=int)
    p.add_argument("--km", type=int)
    p.add_argument("--kr", type=int)
    p.add_argument("--restart", action="store_true", help="ViSeR fine-tuning restarts from the initialization")
    p.add_argument("--lr", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--decay-steps", type=int, nargs="*")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout-p", type=float)
    p.add_argument("--workers", type=int, help="parallel seeds (default: $VISER_THREADS or 1)")
    p.add_argument("--out-dir", default="runs")
    p.add_argument("--force", action="store_true", help="overwrite an existing run record")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen", help="export a synthetic dataset as embedding corpora")
    _add_spec_flags(p)
    p.add_argument("--format", choices=["jsonl", "binary"], default="jsonl")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("contour", help="p(y=1|x) over the latent plane as a CSV matrix")
    _add_spec_flags(p)
    p.add_argument("--method", default="cross_entropy",
                   choices=sorted(set(experiment.METHODS) | set(REG_TO_METHOD)))
    p.add_argument("--params", help="use a saved checkpoint instead of training")
    p.add_argument("--lr", type=float)
    p.add_argument("--resolution", type=int, default=101)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_contour)

    p = sub.add_parser("eval", help="AP, error and localization report for a predictions file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--tolerance", type=float, default=metrics.DEFAULT_TOLERANCE)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ViserError, OSError, ValueError, KeyError) as exc:
        print(f"viser {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

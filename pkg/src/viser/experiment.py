"""Synthetic benchmark of the five regularizers, and run-record persistence."""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, metrics, model, synthetic
from .embedding import Corpus
from .errors import DivergenceError
from .neighbor_search import SearchParams
from .perturbation import PerturbationConfig, viser_augment

METHODS = ("cross_entropy", "dropout", "at", "vat", "viser")


@dataclass(frozen=True)
class ViserConfig:
    k_m: int = 1000
    k_r: int = 10
    shard_count: int = 1
    take: int = 1
    restart: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple[str, ...] = METHODS
    seeds: tuple[int, ...] = tuple(range(50))
    spec: synthetic.SyntheticSpec = synthetic.SyntheticSpec()
    train: model.TrainConfig = model.TrainConfig()
    # best values on held-out seeds 1000-1019; larger radii only hurt at this schedule
    at: PerturbationConfig = PerturbationConfig(epsilon=0.001)
    vat: PerturbationConfig = PerturbationConfig(epsilon=0.03)
    viser: ViserConfig = ViserConfig()
    adversarial_weight: float = 1.0

    def __post_init__(self):
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods: {sorted(bad)}")
        object.__setattr__(self, "methods", tuple(m for m in METHODS if m in self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        kw = {}
        if "methods" in d:
            kw["methods"] = tuple(d["methods"])
        if "seeds" in d:
            kw["seeds"] = tuple(d["seeds"])
        if "spec" in d:
            kw["spec"] = synthetic.SyntheticSpec(**d["spec"])
        if "train" in d:
            t = dict(d["train"])
            if "decay_steps" in t:
                t["decay_steps"] = tuple(t["decay_steps"])
            kw["train"] = model.TrainConfig(**t)
        for name in ("at", "vat"):
            if name in d:
                kw[name] = PerturbationConfig(**d[name])
        if "viser" in d:
            kw["viser"] = ViserConfig(**d["viser"])
        if "adversarial_weight" in d:
            kw["adversarial_weight"] = float(d["adversarial_weight"])
        return cls(**kw)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SeedResult:
    seed: int
    errors: dict[str, float]
    diagnostics: dict = field(default_factory=dict)


@dataclass
class RunRecord:
    config: dict
    per_seed: list[dict]
    aggregate: dict[str, dict[str, float]]
    wall_clock_s: float
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


def aggregate(per_seed: Sequence[dict], methods: Sequence[str]) -> dict[str, dict[str, float]]:
    """Mean and sample standard deviation of each method's per-seed error."""
    out = {}
    for m in methods:
        vals = np.array([r["errors"][m] for r in per_seed], dtype=np.float64)
        out[m] = {
            "mean": float(vals.mean()),
            "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
            "n": int(len(vals)),
        }
    return out


def test_error(params: model.MlpParams, split: synthetic.Split) -> float:
    p = model.predict_proba(params, split.x)[:, 0]
    return metrics.classification_error(p, split.cls)


def embed_split(params: model.MlpParams, x: np.ndarray, ids: np.ndarray, labels=None):
    """Penultimate embeddings as a Corpus; rows with an all-zero activation are dropped."""
    h = model.penultimate_raw(params, x)
    alive = np.any(h != 0.0, axis=1)
    rows = np.flatnonzero(alive)
    vecs = h[rows] / np.linalg.norm(h[rows], axis=1, keepdims=True)
    lab = None if labels is None else [labels[i] for i in rows]
    return Corpus(ids[rows], vecs, lab), rows


def viser_finetune(pretrained: model.MlpParams, ds: synthetic.SyntheticDataset, train_cfg: model.TrainConfig,
                   vcfg: ViserConfig, init: model.MlpParams | None = None):
    """Augment the labeled set with regularizer samples and train on the union.

    Returns the trained parameters and augmentation diagnostics. Training
    continues from ``pretrained`` unless ``vcfg.restart`` is set, in which case
    it starts again from ``init``.
    """
    n_l = len(ds.train)
    lab_ids = np.arange(n_l, dtype=np.uint64)
    unl_ids = np.arange(len(ds.unlabeled), dtype=np.uint64)
    # two-class task with one sigmoid output: class 1 <-> label index 0 present
    labels = [(0,) if c == 1 else () for c in ds.train.cls]
    lab_corpus, lab_rows = embed_split(pretrained, ds.train.x, lab_ids, labels)
    unl_corpus, unl_rows = embed_split(pretrained, ds.unlabeled.x, unl_ids)
    aug = viser_augment(
        lab_corpus, unl_corpus,
        SearchParams(vcfg.k_m, vcfg.k_r, vcfg.shard_count), vcfg.take,
        n_classes=1,
        labeled_features=ds.train.x[lab_rows],
        unlabeled_features=ds.unlabeled.x[unl_rows],
    )
    # labeled samples whose own embedding was dead still train, just without neighbors
    missing = np.setdiff1d(np.arange(n_l), lab_rows)
    X = np.concatenate([aug.X, ds.train.x[missing]])
    Y = np.concatenate([aug.Y, ds.train.cls[missing, None].astype(np.float64)])
    start = init if vcfg.restart else pretrained
    result = model.train(X, Y, train_cfg, model.Regularizer("none"), init=start)
    transferred = [int(s.features_source_id) for s in aug.samples]
    true_cls = ds.unlabeled.cls[transferred] if transferred else np.array([])
    given = np.array([1 if s.labels else 0 for s in aug.samples])
    diag = {
        "added": aug.n_added,
        "label_agreement": float(np.mean(true_cls == given)) if transferred else None,
        "dead_unlabeled": int(len(ds.unlabeled) - len(unl_rows)),
        "dead_labeled": int(len(missing)),
    }
    return result, diag


def train_methods(cfg: ExperimentConfig, seed: int, methods: Sequence[str] | None = None):
    """Train each method on one seed's data from a shared initialization.

    Returns ``(dataset, {method: TrainResult}, diagnostics)``.
    """
    methods = cfg.methods if methods is None else tuple(methods)
    ds = synthetic.generate(replace(cfg.spec, seed=seed))
    tcfg = replace(cfg.train, seed=seed)
    init = model.init_params(ds.spec.ambient_dim, 1, seed)
    X, Y = ds.train.x, ds.train.cls[:, None].astype(np.float64)
    results: dict[str, model.TrainResult] = {}
    diag: dict = {}

    def fit(method, reg):
        try:
            return model.train(X, Y, tcfg, reg, init=init)
        except DivergenceError as exc:
            raise DivergenceError(exc.step, f"seed {seed}, method {method}: non-finite loss") from exc

    ce = None
    if "cross_entropy" in methods or "viser" in methods:
        ce = fit("cross_entropy", model.Regularizer("none"))
    for m in methods:
        if m == "cross_entropy":
            res = ce
        elif m == "dropout":
            res = fit(m, model.Regularizer("dropout"))
        elif m == "at":
            res = fit(m, model.Regularizer("at", cfg.at, cfg.adversarial_weight))
        elif m == "vat":
            res = fit(m, model.Regularizer("vat", cfg.vat, cfg.adversarial_weight))
        elif m == "viser":
            try:
                res, diag["viser"] = viser_finetune(ce.params, ds, tcfg, cfg.viser, init)
            except DivergenceError as exc:
                raise DivergenceError(exc.step, f"seed {seed}, method viser: non-finite loss") from exc
        else:
            raise ValueError(f"unknown method {m!r}")
        results[m] = res
        if res.monotone_violations:
            diag.setdefault("monotone_violations", {})[m] = len(res.monotone_violations)
    return ds, results, diag


def run_seed(cfg: ExperimentConfig, seed: int) -> SeedResult:
    ds, results, diag = train_methods(cfg, seed)
    errors = {m: test_error(r.params, ds.test) for m, r in results.items()}
    return SeedResult(seed, errors, diag)


def _run_seed_job(args):
    cfg_dict, seed = args
    return run_seed(ExperimentConfig.from_dict(cfg_dict), seed)


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("VISER_THREADS", "1")))
    except ValueError:
        return 1


def run_benchmark(cfg: ExperimentConfig = ExperimentConfig(), workers: int | None = None,
                  progress=None) -> RunRecord:
    """Every method on every seed; a failing seed aborts the whole run."""
    start = time.perf_counter()
    workers = min(workers or thread_cap(), len(cfg.seeds)) or 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed_job, [(cfg.to_dict(), s) for s in cfg.seeds]))
    else:
        results = []
        for s in cfg.seeds:
            results.append(run_seed(cfg, s))
            if progress:
                progress(results[-1])
    results.sort(key=lambda r: cfg.seeds.index(r.seed))
    per_seed = [{"seed": r.seed, "errors": r.errors, "diagnostics": r.diagnostics} for r in results]
    return RunRecord(
        config=cfg.to_dict(),
        per_seed=per_seed,
        aggregate=aggregate(per_seed, cfg.methods),
        wall_clock_s=time.perf_counter() - start,
    )


def save_record(record: RunRecord, directory, force: bool = False) -> Path:
    """Write ``run-<config digest>.json``; refuses to replace an existing file unless forced."""
    cfg = ExperimentConfig.from_dict(record.config)
    path = Path(directory) / f"run-{cfg.digest()}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass force=True to overwrite")
    path.write_text(record.to_json() + "\n", encoding="utf-8")
    return path


def record_without_clock(record: RunRecord) -> dict:
    d = asdict(record)
    d.pop("wall_clock_s")
    return d


__all__ = [
    "METHODS", "ExperimentConfig", "ViserConfig", "RunRecord", "SeedResult",
    "aggregate", "train_methods", "run_seed", "run_benchmark", "save_record", "viser_finetune",
]

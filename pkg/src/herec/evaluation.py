"""Experiment harness: splits, error metrics, cold-start cohorts, meta-path
ablations and hyperparameter sweeps.

Every study goes through :func:`evaluate_split`, which builds the graph seen
by one training split, embeds it, and scores the baseline and every requested
fusion kind on the same held-out records.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .embedder import EmbedConfig, EmbeddingSet, embed_all
from .fusion import FusionKind
from .hin import HinGraph, MetaPath, RatingDataset
from .recommender import HerecModel, HyperParams, MFModel
from .walker import WalkConfig

log = logging.getLogger(__name__)

METRIC_FIELDS = ["ratio", "repeat", "method", "mae", "rmse"]


# --------------------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitSpec:
    train_ratio: float = 0.8
    repeats: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_ratio < 1.0:
            raise ValueError(f"train_ratio must lie in (0, 1), got {self.train_ratio}")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


def train_size(n: int, ratio: float) -> int:
    # round toward the training side; the epsilon absorbs 0.6 * 100 = 60.00000000000001
    return min(n, math.ceil(ratio * n - 1e-9))


def split_one(ds: RatingDataset, ratio: float, seed: int, repeat: int):
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, repeat])
    perm = rng.permutation(len(ds))
    n_train = train_size(len(ds), ratio)
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


def split(ds: RatingDataset, spec: SplitSpec) -> list:
    """Record-level random (train, test) pairs, one per repeat."""
    return [split_one(ds, spec.train_ratio, spec.seed, k) for k in range(spec.repeats)]


# --------------------------------------------------------------------------- metrics


def _as_arrays(pairs):
    a = np.asarray(pairs, dtype=np.float64)
    if a.size == 0:
        raise ValueError("no (truth, prediction) pairs to score")
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError(f"pairs must have shape (n, 2), got {a.shape}")
    return a[:, 0], a[:, 1]


def mae(pairs) -> float:
    t, p = _as_arrays(pairs)
    return float(np.mean(np.abs(t - p)))


def rmse(pairs) -> float:
    t, p = _as_arrays(pairs)
    e = np.abs(t - p)
    top = e.max()
    if top == 0 or not np.isfinite(top):
        return float(top)
    # scaled by the largest error so tiny or huge errors neither underflow nor overflow when squared
    return float(top * np.sqrt(np.mean((e / top) ** 2)))


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    n: int
    per_repeat: list = field(default_factory=list)  # (mae, rmse, n) tuples

    @classmethod
    def from_pairs(cls, pairs) -> "MetricsReport":
        a, r = mae(pairs), rmse(pairs)
        n = len(pairs)
        return cls(a, r, n, [(a, r, n)])

    @classmethod
    def from_repeats(cls, repeats) -> "MetricsReport":
        repeats = list(repeats)
        if not repeats:
            raise ValueError("no repeats to aggregate")
        arr = np.array([(m, r) for m, r, _ in repeats])
        return cls(float(arr[:, 0].mean()), float(arr[:, 1].mean()),
                   int(sum(n for _, _, n in repeats)), repeats)

    @property
    def mae_std(self) -> float:
        return float(np.std([m for m, _, _ in self.per_repeat], ddof=1)) if len(self.per_repeat) > 1 else 0.0

    @property
    def rmse_std(self) -> float:
        return float(np.std([r for _, r, _ in self.per_repeat], ddof=1)) if len(self.per_repeat) > 1 else 0.0


def score(model, test: RatingDataset) -> MetricsReport:
    """Metrics of a model on a test set; predictions are clipped to the rating scale."""
    pred = model.predict_many([(r.user, r.item) for r in test.records], clip=True)
    truth = np.array([r.rating for r in test.records])
    return MetricsReport.from_pairs(np.column_stack([truth, pred]))


# --------------------------------------------------------------------------- single split


@dataclass
class EvalSetup:
    """Everything needed to fit and score models on one dataset."""

    graph: HinGraph
    ratings: RatingDataset
    user_type: str
    item_type: str
    meta_paths: dict  # {"user": [MetaPath], "item": [MetaPath]}
    walk: WalkConfig = WalkConfig()
    embed: EmbedConfig = EmbedConfig()
    hyper: HyperParams = HyperParams()
    kinds: tuple = (FusionKind.PERSONALIZED_NONLINEAR,)
    baseline: bool = True
    rating_edges: bool = True  # rebuild user-item edges from each training split

    def rating_relation(self) -> bool:
        return self.graph.schema.allows(self.user_type, self.item_type)

    def uses_ratings(self, mp: MetaPath) -> bool:
        """Does a walk along ``mp`` ever step across the user-item relation?"""
        if not self.rating_edges:
            return False
        pair = {self.user_type, self.item_type}
        return any({a, b} == pair for a, b in zip(mp.types, mp.types[1:]))


def method_name(kind) -> str:
    return "herec_" + FusionKind.parse(kind).short


def split_graph(setup: EvalSetup, train: RatingDataset) -> HinGraph:
    """The graph as seen during training: user-item edges come only from ``train``."""
    if not (setup.rating_edges and setup.rating_relation()):
        return setup.graph
    drop = (setup.user_type, setup.item_type)
    return setup.graph.with_edges(((r.user, r.item) for r in train.records), drop=drop)


class _EmbeddingCache:
    """Embeddings of paths that never touch rating edges do not depend on the split."""

    def __init__(self, setup: EvalSetup):
        self.setup = setup
        self.static: dict = {}

    def get(self, g: HinGraph, paths, ecfg: EmbedConfig, workers: int = 1) -> EmbeddingSet | None:
        paths = list(paths)
        if not paths:
            return None
        todo = [mp for mp in paths if self.setup.uses_ratings(mp) or (mp.label, ecfg) not in self.static]
        if todo:
            fresh = embed_all(g, todo, self.setup.walk, ecfg, workers=workers)
            for mp in todo:
                if not self.setup.uses_ratings(mp):
                    self.static[(mp.label, ecfg)] = (fresh.matrices[mp.label], fresh.missing[mp.label])
        else:
            fresh = None
        out = EmbeddingSet(paths[0].target, {})
        for mp in paths:
            if fresh is not None and mp.label in fresh.matrices:
                out.matrices[mp.label] = fresh.matrices[mp.label]
                out.missing[mp.label] = fresh.missing[mp.label]
            else:
                out.matrices[mp.label], out.missing[mp.label] = self.static[(mp.label, ecfg)]
        return out


def fit_methods(setup: EvalSetup, train: RatingDataset, hyper: HyperParams, user_emb, item_emb,
                kinds=None) -> dict:
    """Trained models keyed by method name; the baseline first when enabled."""
    models = {}
    if setup.baseline:
        m = MFModel(train, hyper)
        m.train(train)
        models["mf"] = m
    for kind in (setup.kinds if kinds is None else kinds):
        m = HerecModel(train, user_emb, item_emb, kind, hyper)
        m.report = m.train(train)
        models[method_name(kind)] = m
    return models


def evaluate_split(setup: EvalSetup, train: RatingDataset, test: RatingDataset, repeat: int = 0,
                   cache: _EmbeddingCache | None = None, hyper: HyperParams | None = None,
                   ecfg: EmbedConfig | None = None, paths: dict | None = None) -> dict:
    """Fit every method on ``train`` and return {method: MetricsReport} on ``test``."""
    cache = cache or _EmbeddingCache(setup)
    hyper = (hyper or setup.hyper)
    hyper = hyper.replace(seed=repeat_seed(hyper.seed, repeat))
    ecfg = ecfg or setup.embed
    paths = paths or setup.meta_paths
    g = split_graph(setup, train)
    user_emb = cache.get(g, paths.get("user", []), ecfg)
    item_emb = cache.get(g, paths.get("item", []), ecfg)
    models = fit_methods(setup, train, hyper, user_emb, item_emb)
    return {name: score(m, test) for name, m in models.items()}


def repeat_seed(seed: int, repeat: int) -> int:
    return int(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, repeat]).generate_state(1)[0])


# --------------------------------------------------------------------------- protocol


def _ratio_job(args):
    setup, ratio, seed, repeat = args
    train, test = split_one(setup.ratings, ratio, seed, repeat)
    res = evaluate_split(setup, train, test, repeat, cache=_job_cache(setup))
    return ratio, repeat, res


_JOB_CACHE: dict = {}


def _job_cache(setup):
    # one evaluate() call at a time per process; workers see pickled copies of one setup
    if "cache" not in _JOB_CACHE:
        _JOB_CACHE["cache"] = _EmbeddingCache(setup)
    return _JOB_CACHE["cache"]


def _run_jobs(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def evaluate(setup: EvalSetup, ratios, repeats: int, seed: int = 0, workers: int = 1):
    """Run the split/train/score protocol; returns (csv rows, {(ratio, method): MetricsReport})."""
    jobs = [(setup, float(r), seed, k) for r in ratios for k in range(repeats)]
    _JOB_CACHE.clear()
    try:
        results = _run_jobs(_ratio_job, jobs, workers)
    finally:
        _JOB_CACHE.clear()
    rows, grouped = [], {}
    for ratio, repeat, res in sorted(results, key=lambda t: (-t[0], t[1])):
        for method, rep in res.items():
            rows.append({"ratio": ratio, "repeat": repeat, "method": method, "mae": rep.mae, "rmse": rep.rmse})
            grouped.setdefault((ratio, method), []).append(rep.per_repeat[0])
    return rows, {k: MetricsReport.from_repeats(v) for k, v in grouped.items()}


# --------------------------------------------------------------------------- cold start


@dataclass(frozen=True)
class ColdStartSpec:
    bounds: tuple = (0, 5, 15, 30)  # groups are (b[k], b[k+1]]

    def __post_init__(self):
        b = self.bounds
        if len(b) < 2 or any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError(f"group boundaries must be strictly increasing, got {b}")

    @property
    def groups(self) -> list:
        return list(zip(self.bounds, self.bounds[1:]))

    def group_of(self, count: int):
        for lo, hi in self.groups:
            if lo < count <= hi:
                return lo, hi
        return None


def group_label(g) -> str:
    return f"({g[0]},{g[1]}]"


def cold_start_groups(train: RatingDataset, test: RatingDataset, spec: ColdStartSpec = ColdStartSpec()) -> dict:
    """Test users bucketed by how many ratings they have in ``train``: {group: set of users}."""
    counts: dict = {}
    for r in train.records:
        counts[r.user] = counts.get(r.user, 0) + 1
    out = {g: set() for g in spec.groups}
    for u in {r.user for r in test.records}:
        g = spec.group_of(counts.get(u, 0))
        if g is not None:
            out[g].add(u)
    return out


def improvement(base: float, value: float) -> float:
    return (base - value) / base if base > 0 else 0.0


def cold_start_eval(model, train: RatingDataset, test: RatingDataset, spec: ColdStartSpec = ColdStartSpec(),
                    baseline=None) -> list:
    """Per-group rows: group, n_users, n, mae, rmse and, with a baseline, its metrics and the
    relative improvement of ``model`` over it."""
    rows = []
    for g, users in cold_start_groups(train, test, spec).items():
        recs = [r for r in test.records if r.user in users]
        row = {"group": group_label(g), "n_users": len(users), "n": len(recs)}
        if not recs:
            rows.append(row)
            continue
        sub = RatingDataset(recs, test.scale)
        rep = score(model, sub)
        row.update(mae=rep.mae, rmse=rep.rmse)
        if baseline is not None:
            b = score(baseline, sub)
            row.update(base_mae=b.mae, base_rmse=b.rmse,
                       improvement_mae=improvement(b.mae, rep.mae), improvement_rmse=improvement(b.rmse, rep.rmse))
        rows.append(row)
    return rows


def cold_start_study(setup: EvalSetup, ratio: float, repeats: int, seed: int = 0,
                     spec: ColdStartSpec = ColdStartSpec()) -> list:
    """Cold-start rows averaged over repeats for each fusion kind against the MF baseline."""
    cache = _EmbeddingCache(setup)
    acc: dict = {}
    for k in range(repeats):
        train, test = split_one(setup.ratings, ratio, seed, k)
        hyper = setup.hyper.replace(seed=repeat_seed(setup.hyper.seed, k))
        g = split_graph(setup, train)
        ue = cache.get(g, setup.meta_paths.get("user", []), setup.embed)
        ie = cache.get(g, setup.meta_paths.get("item", []), setup.embed)
        models = fit_methods(replace(setup, baseline=True), train, hyper, ue, ie)
        base = models.pop("mf")
        for name, m in models.items():
            for row in cold_start_eval(m, train, test, spec, base):
                acc.setdefault((name, row["group"]), []).append(row)
    out = []
    for (name, group), rows in acc.items():
        merged = {"method": name, "group": group, "n_users": sum(r["n_users"] for r in rows),
                  "n": sum(r["n"] for r in rows)}
        for key in ("mae", "rmse", "base_mae", "base_rmse", "improvement_mae", "improvement_rmse"):
            vals = [r[key] for r in rows if key in r]
            merged[key] = float(np.mean(vals)) if vals else float("nan")
        out.append(merged)
    return out


# --------------------------------------------------------------------------- studies


def _prefix_paths(ordered, k: int) -> dict:
    chosen = ordered[:k]
    return {"user": [mp for side, mp in chosen if side == "user"],
            "item": [mp for side, mp in chosen if side == "item"]}


def metapath_ablation(setup: EvalSetup, ordered, ratio: float, repeats: int, seed: int = 0) -> list:
    """Metrics for growing prefixes of ``ordered`` ((side, MetaPath) pairs), one list entry per
    prefix: (labels, {method: MetricsReport})."""
    ordered = list(ordered)
    cache = _EmbeddingCache(setup)
    sub = replace(setup, baseline=False)
    out = []
    for k in range(1, len(ordered) + 1):
        paths = _prefix_paths(ordered, k)
        per: dict = {}
        for rep in range(repeats):
            train, test = split_one(setup.ratings, ratio, seed, rep)
            res = evaluate_split(sub, train, test, rep, cache=cache, paths=paths)
            for name, m in res.items():
                per.setdefault(name, []).append(m.per_repeat[0])
        labels = [mp.label for _, mp in ordered[:k]]
        out.append((labels, {name: MetricsReport.from_repeats(v) for name, v in per.items()}))
    return out


def sweep(setup: EvalSetup, grid: dict, ratio: float, repeats: int, seed: int = 0) -> list:
    """Full factorial over ``grid`` keys among D, alpha, beta, d. Returns (cell, {method: report})."""
    allowed = ("D", "alpha", "beta", "d")
    unknown = set(grid) - set(allowed)
    if unknown:
        raise ValueError(f"cannot sweep over {sorted(unknown)}; choose from {allowed}")
    keys = [k for k in allowed if k in grid]
    values = [list(grid[k]) for k in keys]
    cache = _EmbeddingCache(setup)
    sub = replace(setup, baseline=False)
    out = []
    for combo in itertools.product(*values):
        cell = dict(zip(keys, combo))
        hyper = setup.hyper.replace(**{k: v for k, v in cell.items() if k != "d"})
        ecfg = replace(setup.embed, dim=int(cell["d"])) if "d" in cell else setup.embed
        per: dict = {}
        for rep in range(repeats):
            train, test = split_one(setup.ratings, ratio, seed, rep)
            res = evaluate_split(sub, train, test, rep, cache=cache, hyper=hyper, ecfg=ecfg)
            for name, m in res.items():
                per.setdefault(name, []).append(m.per_repeat[0])
        out.append((cell, {name: MetricsReport.from_repeats(v) for name, v in per.items()}))
    return out


# --------------------------------------------------------------------------- CSV output


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def write_rows(path, rows, fieldnames):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in fieldnames})


def write_metrics_csv(path, rows):
    write_rows(path, rows, METRIC_FIELDS)


def summary_rows(reports: dict) -> list:
    return [{"ratio": ratio, "method": method, "mae": r.mae, "rmse": r.rmse, "mae_std": r.mae_std,
             "rmse_std": r.rmse_std, "repeats": len(r.per_repeat)}
            for (ratio, method), r in sorted(reports.items(), key=lambda kv: (-kv[0][0], kv[0][1]))]


def ablation_rows(result) -> list:
    rows = []
    for k, (labels, reps) in enumerate(result, start=1):
        for method, r in reps.items():
            rows.append({"prefix": k, "paths": "+".join(labels), "method": method, "mae": r.mae,
                         "rmse": r.rmse, "mae_std": r.mae_std, "rmse_std": r.rmse_std})
    return rows


def sweep_rows(result) -> list:
    rows = []
    for cell, reps in result:
        for method, r in reps.items():
            rows.append({**cell, "method": method, "mae": r.mae, "rmse": r.rmse,
                         "mae_std": r.mae_std, "rmse_std": r.rmse_std})
    return rows


SUMMARY_FIELDS = ["ratio", "method", "mae", "rmse", "mae_std", "rmse_std", "repeats"]
ABLATION_FIELDS = ["prefix", "paths", "method", "mae", "rmse", "mae_std", "rmse_std"]
SWEEP_FIELDS = ["D", "alpha", "beta", "d", "method", "mae", "rmse", "mae_std", "rmse_std"]
COLD_FIELDS = ["method", "group", "n_users", "n", "mae", "rmse", "base_mae", "base_rmse",
               "improvement_mae", "improvement_rmse"]

"""End-to-end orchestration: ingest, similarities, factors, training, metrics.

Reads one JSON experiment config, runs the stages in order with per-artifact
disk caching, and writes a metrics report plus model and trace files.
Similarity matrices are computed over the *training* split's rating
adjacency only, so held-out pairs never shape the features; test labels are
first touched in the evaluation stage (see :data:`label_access_hook`).
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import factors, fmg, hin, metagraph, solvers

DEFAULT_LAMBDA_GRID = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5)

# Test instrumentation: when set, called as hook(role, stage) whenever a
# split's labels are materialized.  Lets tests assert that test labels are
# only read by the evaluation stage.
label_access_hook = None


def _labels(rating_set, stage):
    if label_access_hook is not None:
        label_access_hook(rating_set.role, stage)
    return rating_set.values


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for CLI reporting."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def rmse(predictions, labels):
    """Root-mean-square error; inputs must be equal-length and non-empty."""
    predictions = np.asarray(predictions, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if predictions.shape != labels.shape:
        raise ValueError(f"shape mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("cannot compute RMSE of an empty sample")
    return float(np.sqrt(np.sum((labels - predictions) ** 2)) / np.sqrt(predictions.size))


def nnz_ratio(params, tol=1e-10):
    """Fraction of nonzero first/second-order parameters (bias excluded)."""
    return fmg.param_nnz_ratio(params, tol=tol)


def report_selected(params, layout, threshold=1e-10):
    """Per-group norms and selected flags for first- and second-order blocks."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    w_norms = fmg.group_norms(params.w, layout)
    v_norms = fmg.group_norms(params.V, layout)
    return [
        {
            "group": label,
            "w_norm": float(wn),
            "v_norm": float(vn),
            "w_selected": bool(wn > threshold),
            "v_selected": bool(vn > threshold),
        }
        for (label, _, _), wn, vn in zip(layout.groups, w_norms, v_norms)
    ]


@dataclass
class ExperimentConfig:
    """Everything one run needs; see ``from_json`` for the file layout."""

    schema: str
    metagraphs: str
    select: list = None  # subset of metagraph names; None = all
    fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    binarize_ratings: bool = True
    log_scale_similarity: bool = False
    optimize_plans: bool = False
    feature_method: str = "mf"  # mf | nnr
    rank: int = 10
    mu: float = 0.01
    max_rank: int = 10  # emitted NNR feature cap
    standardize_features: bool = False  # per-column z-scoring fit on train
    K: int = 10
    mode: str = "convex"
    lambdas: tuple = DEFAULT_LAMBDA_GRID
    eta_weighting: str = "ones"  # ones | sqrt
    solver: solvers.SolverConfig = field(default_factory=solvers.SolverConfig)
    clip_predictions: bool = True
    rating_range: tuple = (1.0, 5.0)
    repeats: int = 1
    workers: int = 1  # per-metagraph similarity/factorization jobs in flight

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        lams = self.lambdas if hasattr(self.lambdas, "__len__") else (self.lambdas,)
        if any(l < 0 for l in lams):
            raise ValueError("lambda must be >= 0")
        self.lambdas = tuple(lams)
        if self.feature_method not in ("mf", "nnr"):
            raise ValueError(f"unknown feature method {self.feature_method!r}")

    @classmethod
    def from_dict(cls, doc, base_dir="."):
        solver_doc = dict(doc.get("solver", {}))
        solver_cfg = solvers.SolverConfig(**solver_doc)
        feat = doc.get("features", {})
        fm = doc.get("fm", {})
        split = doc.get("split", {})
        cfg = cls(
            schema=os.path.join(base_dir, doc["schema"]),
            metagraphs=os.path.join(base_dir, doc["metagraphs"]),
            select=doc.get("select"),
            fractions=tuple(split.get("fractions", (0.8, 0.1, 0.1))),
            seed=int(split.get("seed", doc.get("seed", 0))),
            binarize_ratings=doc.get("binarize_ratings", True),
            log_scale_similarity=doc.get("log_scale_similarity", False),
            optimize_plans=doc.get("optimize_plans", False),
            feature_method=feat.get("method", "mf"),
            rank=int(feat.get("rank", 10)),
            mu=float(feat.get("mu", 0.01)),
            max_rank=feat.get("max_rank", 10),
            standardize_features=feat.get("standardize", False),
            K=int(fm.get("K", 10)),
            mode=fm.get("mode", "convex"),
            lambdas=fm.get("lambda", DEFAULT_LAMBDA_GRID),
            eta_weighting=fm.get("eta_weighting", "ones"),
            solver=solver_cfg,
            clip_predictions=doc.get("clip_predictions", True),
            rating_range=tuple(doc.get("rating_range", (1.0, 5.0))),
            repeats=int(doc.get("repeats", 1)),
            workers=int(doc.get("workers", 1)),
        )
        if "seed" in doc and "seed" not in split:
            cfg.solver.seed = int(doc["seed"])
        for path in (cfg.schema, cfg.metagraphs):
            if not os.path.exists(path):
                raise ValueError(f"config references a missing file: {path}")
        return cfg

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls.from_dict(doc, base_dir=os.path.dirname(os.path.abspath(path)))


@dataclass
class MetricsReport:
    rmse_train: float = None
    rmse_valid: float = None
    rmse_test: float = None
    rmse_test_std: float = None
    nnz: float = None
    selected_lambda: float = None
    groups: list = field(default_factory=list)
    lambda_series: list = field(default_factory=list)
    stage_seconds: dict = field(default_factory=dict)
    cache_events: dict = field(default_factory=dict)
    repeats: list = field(default_factory=list)

    def to_dict(self):
        return {
            "rmse": {"train": self.rmse_train, "valid": self.rmse_valid, "test": self.rmse_test,
                     "test_std": self.rmse_test_std},
            "nnz": self.nnz,
            "selected_lambda": self.selected_lambda,
            "groups": self.groups,
            "lambda_series": self.lambda_series,
            "stage_seconds": self.stage_seconds,
            "cache_events": self.cache_events,
            "repeats": self.repeats,
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def comparable(self):
        """Everything except timings and cache bookkeeping (for determinism checks)."""
        doc = self.to_dict()
        doc.pop("stage_seconds")
        doc.pop("cache_events")
        return doc


def _hash_file(path, h):
    with open(path, "rb") as fh:
        while chunk := fh.read(65536):
            h.update(chunk)


def _input_fingerprint(config):
    """Content hash over the schema, every referenced data file and the DSL file."""
    h = hashlib.sha256()
    _hash_file(config.schema, h)
    schema = hin.load_schema(config.schema)
    base = os.path.dirname(os.path.abspath(config.schema))
    for rel in schema["relations"]:
        _hash_file(os.path.join(base, rel["file"]), h)
    if schema.get("ratings"):
        _hash_file(os.path.join(base, schema["ratings"]["file"]), h)
    _hash_file(config.metagraphs, h)
    return h.hexdigest()[:16]


def _key(*parts):
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class _Stages:
    """Shared machinery for the CLI stage commands and run_pipeline."""

    def __init__(self, config, out_dir, cache_dir=None):
        self.config = config
        self.out_dir = out_dir
        self.cache_dir = cache_dir or os.path.join(out_dir, "cache")
        os.makedirs(self.out_dir, exist_ok=True)
        os.makedirs(self.cache_dir, exist_ok=True)
        self.stage_seconds = {}
        self.cache_events = {"similarity": [], "factorize": []}
        self.fingerprint = None

    def timed(self, stage, fn):
        start = time.perf_counter()
        try:
            result = fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
        self.stage_seconds[stage] = self.stage_seconds.get(stage, 0.0) + time.perf_counter() - start
        return result

    def map_jobs(self, items, fn):
        """Run independent per-metagraph jobs, in order or on a thread pool."""
        if self.config.workers <= 1:
            return [fn(item) for item in items]
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
            return list(pool.map(fn, items))

    # -- stage bodies ------------------------------------------------------

    def ingest(self):
        cfg = self.config
        store, ratings, rating_decl = hin.ingest(cfg.schema)
        report = hin.validate(store)
        if not report.ok:
            raise ValueError("; ".join(report.errors))
        if ratings is None:
            raise ValueError("schema declares no ratings section")
        self.fingerprint = _input_fingerprint(cfg)
        specs = metagraph.load_metagraph_file(cfg.metagraphs)
        if cfg.select is not None:
            by_name = {s.name: s for s in specs}
            missing = [n for n in cfg.select if n not in by_name]
            if missing:
                raise ValueError(f"selected metagraphs not in DSL file: {missing}")
            specs = [by_name[n] for n in cfg.select]
        if not specs:
            raise ValueError("no metagraphs selected")
        return store, ratings, rating_decl, specs, report

    def split(self, ratings, seed):
        return hin.split_ratings(ratings, self.config.fractions, seed)

    def similarities(self, store, train_ratings, rating_decl, specs, seed):
        cfg = self.config
        hin.attach_ratings(store, train_ratings, rating_decl, binarize=cfg.binarize_ratings)
        for spec in specs:
            if (spec.source_type, spec.sink_type) != (rating_decl.head_type, rating_decl.tail_type):
                raise ValueError(
                    f"metagraph {spec.name!r} runs {spec.source_type}->{spec.sink_type}, but "
                    f"ratings connect {rating_decl.head_type}->{rating_decl.tail_type}"
                )
        def job(spec):
            key = _key(
                "similarity", self.fingerprint, metagraph.format_metagraph(spec),
                cfg.fractions, seed, cfg.binarize_ratings, cfg.log_scale_similarity,
                cfg.optimize_plans,
            )
            path = os.path.join(self.cache_dir, f"sim_{spec.name}_{key}.tsv")
            if os.path.exists(path):
                return metagraph.load_similarity(path), True
            plan = metagraph.compile_plan(spec, store, optimize=cfg.optimize_plans)
            sim = metagraph.execute_plan(plan, store)
            if cfg.log_scale_similarity:
                sim.matrix.data = np.log1p(sim.matrix.data)
            metagraph.save_similarity(path, sim)
            return sim, False

        results = self.map_jobs(specs, job)
        for spec, (_, hit) in zip(specs, results):
            self.cache_events["similarity"].append({"metagraph": spec.name, "hit": hit})
        return [sim for sim, _ in results]

    def factorize(self, sims, seed):
        cfg = self.config

        def job(sim):
            key = _key(
                "factors", self.fingerprint, sim.metagraph, cfg.feature_method, cfg.rank,
                cfg.mu, cfg.max_rank, cfg.fractions, seed, cfg.binarize_ratings,
                cfg.log_scale_similarity,
            )
            upath = os.path.join(self.cache_dir, f"fac_{sim.metagraph}_{key}.user.npz")
            ipath = os.path.join(self.cache_dir, f"fac_{sim.metagraph}_{key}.item.npz")
            if os.path.exists(upath) and os.path.exists(ipath):
                return factors.load_factor_pair(upath, ipath), True
            obs = factors.ObservedMatrix.from_similarity(sim)
            if cfg.feature_method == "mf":
                pair = factors.factorize_mf(obs, cfg.rank, cfg.mu, seed=seed, name=sim.metagraph)
            else:
                pair = factors.factorize_nnr(
                    obs, cfg.mu, seed=seed, max_rank=cfg.max_rank, name=sim.metagraph
                )
            factors.save_factor_side(upath, pair, "user")
            factors.save_factor_side(ipath, pair, "item")
            return pair, False

        results = self.map_jobs(sims, job)
        for sim, (_, hit) in zip(sims, results):
            self.cache_events["factorize"].append({"metagraph": sim.metagraph, "hit": hit})
        return [pair for pair, _ in results]

    def assemble(self, pairs, rating_set, stage):
        table, layout = fmg.assemble_features(pairs, rating_set)
        table.y = _labels(rating_set, stage).copy()
        return table, layout

    def fit_scaler(self, train_table):
        if not self.config.standardize_features:
            return None
        return fmg.fit_standardizer(train_table.X)

    def reg_config(self, layout, lam):
        cfg = self.config
        etas = fmg.sqrt_width_etas(layout) if cfg.eta_weighting == "sqrt" else None
        return fmg.RegConfig(mode=cfg.mode, lam_w=lam, lam_v=lam, eta_w=etas, eta_v=etas)

    def train(self, train_table, valid_table, layout):
        """Sweep the lambda grid, select by validation RMSE, return the winner."""
        cfg = self.config
        clip = cfg.rating_range if cfg.clip_predictions else None
        series = []
        best = None
        for lam in cfg.lambdas:
            problem = solvers.TrainProblem(
                train_table.X, train_table.y, layout, self.reg_config(layout, lam), cfg.K,
                valid=(valid_table.X, valid_table.y) if len(valid_table) else None,
                clip_range=clip,
            )
            params, trace = solvers.train(problem, cfg.solver)
            if len(valid_table):
                pred = fmg.predict_batch(params, valid_table.X)
                if clip is not None:
                    pred = np.clip(pred, *clip)
                valid_rmse = rmse(pred, valid_table.y)
            else:
                valid_rmse = float("nan")
            entry = {"lambda": lam, "rmse_valid": valid_rmse, "nnz": nnz_ratio(params)}
            series.append(entry)
            if best is None or (np.isfinite(valid_rmse) and valid_rmse < best[0]):
                best = (valid_rmse if np.isfinite(valid_rmse) else float("inf"), lam, params, trace)
        _, lam, params, trace = best
        return params, trace, lam, series

    def evaluate(self, params, pairs, splits, layout, scaler=None):
        cfg = self.config
        clip = cfg.rating_range if cfg.clip_predictions else None
        out = {}
        for stage_name, rating_set in splits.items():
            table, _ = fmg.assemble_features(pairs, rating_set)
            X = fmg.standardize(table.X, scaler) if scaler is not None else table.X
            pred = fmg.predict_batch(params, X)
            if clip is not None:
                pred = np.clip(pred, *clip)
            out[stage_name] = rmse(pred, _labels(rating_set, "evaluate")) if len(rating_set) else None
        return out


def run_pipeline(config, out_dir, cache_dir=None):
    """Execute every stage and write metrics.json, model.npz and trace.jsonl."""
    stages = _Stages(config, out_dir, cache_dir)
    report = MetricsReport()

    test_rmses = []
    for repeat in range(config.repeats):
        seed = config.seed + repeat
        store, ratings, rating_decl, specs, _ = stages.timed("ingest", stages.ingest)
        train_rs, valid_rs, test_rs = stages.timed("split", lambda: stages.split(ratings, seed))
        sims = stages.timed(
            "similarity", lambda: stages.similarities(store, train_rs, rating_decl, specs, seed)
        )
        pairs = stages.timed("factorize", lambda: stages.factorize(sims, seed))
        (train_table, layout) = stages.timed(
            "assemble", lambda: stages.assemble(pairs, train_rs, "train")
        )
        (valid_table, _) = stages.timed(
            "assemble", lambda: stages.assemble(pairs, valid_rs, "train")
        )
        scaler = stages.fit_scaler(train_table)
        if scaler is not None:
            train_table.X = fmg.standardize(train_table.X, scaler)
            if len(valid_table):
                valid_table.X = fmg.standardize(valid_table.X, scaler)
        params, trace, lam, series = stages.timed(
            "train", lambda: stages.train(train_table, valid_table, layout)
        )
        rmses = stages.timed(
            "evaluate",
            lambda: stages.evaluate(
                params, pairs, {"train": train_rs, "valid": valid_rs, "test": test_rs}, layout,
                scaler=scaler,
            ),
        )
        test_rmses.append(rmses["test"])
        if repeat == 0:
            report.rmse_train = rmses["train"]
            report.rmse_valid = rmses["valid"]
            report.nnz = nnz_ratio(params)
            report.selected_lambda = lam
            report.groups = report_selected(params, layout)
            report.lambda_series = series
            fmg.save_model(os.path.join(out_dir, "model.npz"), params, layout,
                           stages.reg_config(layout, lam))
            trace.to_jsonl(os.path.join(out_dir, "trace.jsonl"))

    report.repeats = test_rmses
    report.rmse_test = float(np.mean(test_rmses))
    report.rmse_test_std = float(np.std(test_rmses)) if len(test_rmses) > 1 else None
    report.stage_seconds = stages.stage_seconds
    report.cache_events = stages.cache_events
    report.save(os.path.join(out_dir, "metrics.json"))
    return report

"""Training algorithms for the group-sparse factorization machine.

All three solvers minimize the same augmented objective (smooth loss plus
surplus, convex group penalty handled by the proximal step):

* :func:`train_nmapg` — nonmonotone accelerated proximal gradient with the
  running-average acceptance test and a plain proximal fallback step.
* :func:`train_svrg` — proximal stochastic variance-reduced gradient:
  epoch snapshots of the full gradient correct mini-batch directions.
* :func:`train_sgd` — proximal SGD with a decaying step, kept as the
  baseline for convergence comparisons.

The bias is a smooth unregularized coordinate: it rides along in every
gradient step and is skipped by the prox.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import fmg


class DivergenceError(RuntimeError):
    """Objective became non-finite; carries the last finite iterate and trace."""

    def __init__(self, message, params=None, trace=None):
        super().__init__(message)
        self.params = params
        self.trace = trace


@dataclass
class SolverConfig:
    algorithm: str = "nmapg"  # nmapg | svrg | sgd
    step: float = 0.01
    max_iters: int = 500  # outer iterations (nmAPG) or epochs (SVRG/SGD)
    sufficient_decrease: float = 1e-3  # nmAPG acceptance margin delta
    history_decay: float = 0.8  # nmAPG running-average weight
    batch_size: int = None  # SVRG/SGD mini-batch size m_b
    inner_steps: int = None  # SVRG/SGD inner loop count B
    step_decay: float = 0.01  # SGD schedule: step / (1 + decay * t)
    seed: int = 0
    extrapolated_prox_point: bool = True  # nmAPG main prox at the extrapolated point
    fit_w: bool = True  # frozen at zero when False
    fit_V: bool = True
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError(f"step size must be > 0, got {self.step}")
        if self.sufficient_decrease <= 0:
            raise ValueError(f"sufficient decrease must be > 0, got {self.sufficient_decrease}")
        if not 0.0 <= self.history_decay < 1.0:
            raise ValueError(f"history decay must be in [0, 1), got {self.history_decay}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")

    def batch_plan(self, n):
        m_b = self.batch_size
        inner = self.inner_steps
        if m_b is not None and inner is not None:
            if m_b * inner != n:
                raise ValueError(f"batch_size * inner_steps must equal N: {m_b} * {inner} != {n}")
            return m_b, inner
        if m_b is None:
            m_b = max(1, min(128, n // 10))
        if inner is None:
            inner = max(1, n // m_b)
        return m_b, inner


@dataclass
class TrainProblem:
    """One training task: features, labels, layout, regularizer and model width K."""

    X: np.ndarray
    y: np.ndarray
    layout: fmg.GroupLayout
    reg: fmg.RegConfig
    K: int
    valid: tuple = None  # optional (X_valid, y_valid)
    clip_range: tuple = None  # clip trace-RMSE predictions into this range

    def __post_init__(self):
        if len(self.y) == 0:
            raise ValueError("problem has no samples")
        if self.X.shape[1] != self.layout.d:
            raise ValueError(f"feature width {self.X.shape[1]} != layout d {self.layout.d}")
        if self.K < 1:
            raise ValueError("K must be >= 1")

    @property
    def n(self):
        return len(self.y)


@dataclass
class TraceRecord:
    iteration: int
    grad_evals: float  # cumulative sample-gradient evaluations divided by N
    objective: float
    rmse_valid: float = None
    nnz: float = None
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    def append(self, record):
        if self.records and record.grad_evals < self.records[-1].grad_evals:
            raise ValueError("gradient-evaluation counter must not decrease")
        self.records.append(record)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_jsonl(self, path):
        import json

        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(
                    json.dumps(
                        {
                            "iter": r.iteration,
                            "grad_evals_over_N": r.grad_evals,
                            "objective": r.objective,
                            "rmse_valid": r.rmse_valid,
                            "nnz": r.nnz,
                            "seconds": r.seconds,
                            **r.extra,
                        }
                    )
                    + "\n"
                )


def init_params(problem, cfg):
    """w starts at zero, b at the label mean, V at small Gaussian values."""
    rng = np.random.default_rng(cfg.seed)
    d = problem.layout.d
    V = rng.normal(0.0, 0.01, (d, problem.K)) if cfg.fit_V else np.zeros((d, problem.K))
    return fmg.FmParams(float(np.mean(problem.y)), np.zeros(d), V)


class _Objective:
    """Caches the pieces every solver needs: thresholds, gradients, values."""

    def __init__(self, problem, cfg):
        self.problem = problem
        self.cfg = cfg
        eta_w, eta_v = problem.reg.resolved_etas(problem.layout)
        reg = problem.reg
        self.thr_w = reg.kappa0 * reg.lam_w * eta_w
        self.thr_v = reg.kappa0 * reg.lam_v * eta_v
        self.table = fmg.FeatureTable(problem.X, problem.y, None, None)

    def value(self, params):
        """Augmented objective; identical to the reported objective h."""
        return fmg.objective(params, self.table, self.problem.layout, self.problem.reg)

    def grad(self, params, idx=None):
        X = self.problem.X if idx is None else self.problem.X[idx]
        y = self.problem.y if idx is None else self.problem.y[idx]
        gb, gw, gv = fmg.augmented_grad(params, X, y, self.problem.layout, self.problem.reg)
        if not self.cfg.fit_w:
            gw = np.zeros_like(gw)
        if not self.cfg.fit_V:
            gv = np.zeros_like(gv)
        return gb, gw, gv

    def prox_step(self, params, grads, step):
        gb, gw, gv = grads
        b = params.b - step * gb
        w = fmg.prox_group(params.w - step * gw, self.problem.layout, step * self.thr_w)
        V = fmg.prox_group(params.V - step * gv, self.problem.layout, step * self.thr_v)
        return fmg.FmParams(b, w, V)

    def rmse_valid(self, params):
        if self.problem.valid is None:
            return None
        Xv, yv = self.problem.valid
        pred = fmg.predict_batch(params, Xv)
        if self.problem.clip_range is not None:
            pred = np.clip(pred, *self.problem.clip_range)
        return float(np.sqrt(np.mean((pred - yv) ** 2)))


def prox_gradient_residual(params, problem, cfg=None, step=None):
    """Norm of (x - prox(x - step * grad)) / step: a critical-point certificate."""
    cfg = cfg or SolverConfig()
    step = step or cfg.step
    obj = _Objective(problem, cfg)
    moved = obj.prox_step(params, obj.grad(params), step)
    sq = (
        (params.b - moved.b) ** 2
        + float(np.sum((params.w - moved.w) ** 2))
        + float(np.sum((params.V - moved.V) ** 2))
    )
    return np.sqrt(sq) / step


def _distance_sq(p, q):
    return (
        (p.b - q.b) ** 2
        + float(np.sum((p.w - q.w) ** 2))
        + float(np.sum((p.V - q.V) ** 2))
    )


def train_nmapg(problem, cfg=None):
    """Nonmonotone accelerated proximal gradient descent on the FMG objective.

    Follows the accelerated scheme with a running average c_t of observed
    objectives: the prox step at the extrapolated point is accepted when it
    improves on c_t by the sufficient-decrease margin, otherwise a plain
    prox step at the current point competes and the better objective wins.
    On a non-finite objective the step is halved once; a second divergence
    raises :class:`DivergenceError`.
    """
    cfg = cfg or SolverConfig(algorithm="nmapg")
    obj = _Objective(problem, cfg)
    step = cfg.step
    eta = cfg.history_decay
    delta = cfg.sufficient_decrease

    current = init_params(problem, cfg)
    previous = current.copy()
    accel_prev = current.copy()  # the latest extrapolated-prox candidate
    a_prev, a = 0.0, 1.0
    c = obj.value(current)
    q = 1.0
    if not np.isfinite(c):
        raise DivergenceError("objective is non-finite at initialization")

    trace = TrainTrace()
    grad_evals = 0.0
    halvings_left = 1
    started = time.perf_counter()
    t = 1
    while t <= cfg.max_iters:
        # y_t = x_t + a_{t-1}/a_t (accel_prev - x_t) + (a_{t-1}-1)/a_t (x_t - x_{t-1})
        extrap = fmg.FmParams(
            current.b
            + a_prev / a * (accel_prev.b - current.b)
            + (a_prev - 1.0) / a * (current.b - previous.b),
            current.w
            + a_prev / a * (accel_prev.w - current.w)
            + (a_prev - 1.0) / a * (current.w - previous.w),
            current.V
            + a_prev / a * (accel_prev.V - current.V)
            + (a_prev - 1.0) / a * (current.V - previous.V),
        )
        base = extrap if cfg.extrapolated_prox_point else current
        candidate = obj.prox_step(base, obj.grad(base), step)
        grad_evals += 1.0
        h_candidate = obj.value(candidate)
        dist = _distance_sq(candidate, extrap)
        accepted_branch = "extrapolated"
        if np.isfinite(h_candidate) and h_candidate <= c - delta * dist:
            nxt, h_next = candidate, h_candidate
        else:
            fallback = obj.prox_step(current, obj.grad(current), step)
            grad_evals += 1.0
            h_fallback = obj.value(fallback)
            if np.isfinite(h_candidate) and h_candidate < h_fallback:
                nxt, h_next = candidate, h_candidate
                accepted_branch = "fallback_extrapolated"
            else:
                nxt, h_next = fallback, h_fallback
                accepted_branch = "fallback"
        if not np.isfinite(h_next):
            if halvings_left > 0:
                halvings_left -= 1
                step *= 0.5
                previous = current.copy()
                accel_prev = current.copy()
                a_prev, a = 0.0, 1.0
                continue
            raise DivergenceError(
                f"objective diverged at iteration {t} (step {step})", params=current, trace=trace
            )

        previous, current = current, nxt
        accel_prev = candidate
        a_prev, a = a, 0.5 * (np.sqrt(4.0 * a * a + 1.0) + 1.0)
        c_before = c
        q_next = eta * q + 1.0
        c = (eta * q * c + h_next) / q_next
        q = q_next

        if t % cfg.checkpoint_every == 0 or t == cfg.max_iters:
            trace.append(
                TraceRecord(
                    iteration=t,
                    grad_evals=grad_evals,
                    objective=h_next,
                    rmse_valid=obj.rmse_valid(current),
                    nnz=fmg.param_nnz_ratio(current),
                    seconds=time.perf_counter() - started,
                    extra={
                        "c": c,
                        "c_before": c_before,
                        "delta_sq": dist,
                        "branch": accepted_branch,
                        "step": step,
                    },
                )
            )
        t += 1
    return current, trace


def train_svrg(problem, cfg=None):
    """Proximal SVRG: per epoch one full gradient plus B variance-reduced steps.

    Each inner step corrects a uniformly sampled mini-batch gradient with
    the snapshot difference, applies the group prox, and the epoch emits
    the average of its inner iterates (which also becomes the next
    snapshot point).
    """
    cfg = cfg or SolverConfig(algorithm="svrg")
    obj = _Objective(problem, cfg)
    n = problem.n
    m_b, inner = cfg.batch_plan(n)
    rng = np.random.default_rng(cfg.seed)

    snapshot = init_params(problem, cfg)
    inner_point = snapshot.copy()
    trace = TrainTrace()
    grad_evals = 0.0
    started = time.perf_counter()
    value = obj.value(snapshot)
    if not np.isfinite(value):
        raise DivergenceError("objective is non-finite at initialization")
    for epoch in range(1, cfg.max_iters + 1):
        full = obj.grad(snapshot)
        grad_evals += 1.0
        sum_b, sum_w, sum_v = 0.0, np.zeros_like(inner_point.w), np.zeros_like(inner_point.V)
        for _ in range(inner):
            idx = rng.integers(0, n, size=m_b)
            gb1, gw1, gv1 = obj.grad(inner_point, idx)
            gb0, gw0, gv0 = obj.grad(snapshot, idx)
            grad_evals += 2.0 * m_b / n
            direction = (gb1 - gb0 + full[0], gw1 - gw0 + full[1], gv1 - gv0 + full[2])
            inner_point = obj.prox_step(inner_point, direction, cfg.step)
            sum_b += inner_point.b
            sum_w += inner_point.w
            sum_v += inner_point.V
        snapshot = fmg.FmParams(sum_b / inner, sum_w / inner, sum_v / inner)
        value = obj.value(snapshot)
        if not np.isfinite(value):
            raise DivergenceError(
                f"objective diverged in epoch {epoch}; reduce the step size "
                f"(currently {cfg.step}) or standardize the features",
                params=inner_point, trace=trace,
            )
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.max_iters:
            trace.append(
                TraceRecord(
                    iteration=epoch,
                    grad_evals=grad_evals,
                    objective=value,
                    rmse_valid=obj.rmse_valid(snapshot),
                    nnz=fmg.param_nnz_ratio(snapshot),
                    seconds=time.perf_counter() - started,
                )
            )
    return snapshot, trace


def train_sgd(problem, cfg=None):
    """Proximal SGD baseline with step size step / (1 + decay * t)."""
    cfg = cfg or SolverConfig(algorithm="sgd")
    obj = _Objective(problem, cfg)
    n = problem.n
    m_b, inner = cfg.batch_plan(n)
    rng = np.random.default_rng(cfg.seed)

    params = init_params(problem, cfg)
    trace = TrainTrace()
    grad_evals = 0.0
    started = time.perf_counter()
    t = 0
    for epoch in range(1, cfg.max_iters + 1):
        for _ in range(inner):
            idx = rng.integers(0, n, size=m_b)
            step = cfg.step / (1.0 + cfg.step_decay * t)
            params = obj.prox_step(params, obj.grad(params, idx), step)
            grad_evals += m_b / n
            t += 1
        value = obj.value(params)
        if not np.isfinite(value):
            raise DivergenceError(
                f"objective diverged in epoch {epoch}; reduce the step size "
                f"(currently {cfg.step}) or standardize the features",
                params=params, trace=trace,
            )
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.max_iters:
            trace.append(
                TraceRecord(
                    iteration=epoch,
                    grad_evals=grad_evals,
                    objective=value,
                    rmse_valid=obj.rmse_valid(params),
                    nnz=fmg.param_nnz_ratio(params),
                    seconds=time.perf_counter() - started,
                )
            )
    return params, trace


TRAINERS = {"nmapg": train_nmapg, "svrg": train_svrg, "sgd": train_sgd}


def train(problem, cfg):
    try:
        trainer = TRAINERS[cfg.algorithm]
    except KeyError:
        raise ValueError(f"unknown algorithm {cfg.algorithm!r}; pick one of {sorted(TRAINERS)}") from None
    return trainer(problem, cfg)

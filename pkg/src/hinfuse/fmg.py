"""Factorization machine with group-structured sparsity over metagraph features.

Feature vectors concatenate the user blocks of every metagraph followed by
the item blocks, so the d = 2 * sum(F_l) coordinates split into 2L groups.
The regularizer penalizes each group's norm, either directly (convex group
lasso) or through the log-sum penalty kappa(t) = log(1 + t).  The nonconvex
penalty is optimized through its smooth-plus-convex split: the smooth
surplus g = lambda * (kappa(norm) - kappa0 * norm) joins the loss, and the
convex part stays in the proximal step (kappa0 = 1 for both penalties).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GroupLayout:
    """Contiguous disjoint index ranges covering [0, d), one per group."""

    groups: tuple  # (label, start, stop)
    d: int

    @classmethod
    def from_ranks(cls, names, ranks):
        """User groups for every metagraph first, then item groups, per the feature order."""
        groups = []
        offset = 0
        for side in ("user", "item"):
            for name, rank in zip(names, ranks):
                groups.append((f"{name}:{side}", offset, offset + rank))
                offset += rank
        return cls(tuple(groups), offset)

    @property
    def n_groups(self):
        return len(self.groups)

    @property
    def labels(self):
        return [label for label, _, _ in self.groups]

    def slices(self):
        return [slice(start, stop) for _, start, stop in self.groups]

    def widths(self):
        return np.array([stop - start for _, start, stop in self.groups])

    def validate(self):
        pos = 0
        for label, start, stop in self.groups:
            if start != pos or stop <= start:
                raise ValueError(f"group {label!r} [{start}, {stop}) breaks the contiguous cover")
            pos = stop
        if pos != self.d:
            raise ValueError(f"groups cover [0, {pos}) but d = {self.d}")
        if self.n_groups % 2:
            raise ValueError("expected 2L groups (user and item blocks per metagraph)")


@dataclass
class FeatureTable:
    """Sample matrix (N, d) with labels and the (user, item) index per row."""

    X: np.ndarray
    y: np.ndarray
    users: np.ndarray
    items: np.ndarray

    def __len__(self):
        return len(self.y)

    @property
    def d(self):
        return self.X.shape[1]


@dataclass
class FmParams:
    """Global bias, first-order weights (d,) and second-order factors (d, K)."""

    b: float
    w: np.ndarray
    V: np.ndarray

    @property
    def d(self):
        return len(self.w)

    @property
    def K(self):
        return self.V.shape[1]

    def copy(self):
        return FmParams(self.b, self.w.copy(), self.V.copy())

    @classmethod
    def zeros(cls, d, K):
        return cls(0.0, np.zeros(d), np.zeros((d, K)))


@dataclass
class RegConfig:
    """Group regularization: mode, weights and per-group multipliers.

    ``kappa0`` is the limiting derivative of the penalty at zero; it equals
    1 for both the identity penalty (convex mode) and log(1 + t).
    """

    mode: str = "convex"  # convex | lsp
    lam_w: float = 0.0
    lam_v: float = 0.0
    eta_w: np.ndarray = None
    eta_v: np.ndarray = None
    kappa0: float = 1.0

    def __post_init__(self):
        if self.mode not in ("convex", "lsp"):
            raise ValueError(f"mode must be 'convex' or 'lsp', got {self.mode!r}")
        if self.lam_w < 0 or self.lam_v < 0:
            raise ValueError("regularization weights must be >= 0")

    def resolved_etas(self, layout):
        eta_w = np.ones(layout.n_groups) if self.eta_w is None else np.asarray(self.eta_w, dtype=float)
        eta_v = np.ones(layout.n_groups) if self.eta_v is None else np.asarray(self.eta_v, dtype=float)
        if len(eta_w) != layout.n_groups or len(eta_v) != layout.n_groups:
            raise ValueError("per-group weights must have one entry per group")
        if np.any(eta_w <= 0) or np.any(eta_v <= 0):
            raise ValueError("per-group weights must be > 0")
        return eta_w, eta_v


def sqrt_width_etas(layout):
    """Optional group weighting by sqrt(group width)."""
    return np.sqrt(layout.widths().astype(float))


def assemble_features(pairs, ratings):
    """Concatenate per-metagraph factors into one row per rating triple.

    Users or items absent from a metagraph's similarity matrix (no observed
    entries) contribute zero blocks for that metagraph.
    """
    if not pairs:
        raise ValueError("need at least one factor pair")
    m, n = pairs[0].n_users, pairs[0].n_items
    for pair in pairs:
        if (pair.n_users, pair.n_items) != (m, n):
            raise ValueError(
                f"factor pair {pair.metagraph!r} has shape ({pair.n_users}, {pair.n_items}), "
                f"expected ({m}, {n}): all pairs must share the entity sets"
            )
    layout = GroupLayout.from_ranks([p.metagraph for p in pairs], [p.rank for p in pairs])
    layout.validate()

    def masked(matrix, observed):
        if observed is None:
            return matrix
        out = matrix.copy()
        out[~np.asarray(observed, dtype=bool)] = 0.0
        return out

    if len(ratings) == 0:
        X = np.zeros((0, layout.d))
    else:
        users = np.asarray(ratings.users, dtype=np.int64)
        items = np.asarray(ratings.items, dtype=np.int64)
        user_blocks = [masked(p.U, p.user_observed)[users] for p in pairs]
        item_blocks = [masked(p.B, p.item_observed)[items] for p in pairs]
        X = np.concatenate(user_blocks + item_blocks, axis=1)
    table = FeatureTable(X, ratings.values.copy(), ratings.users.copy(), ratings.items.copy())
    return table, layout


def fit_standardizer(X):
    """Per-column mean and deviation of the training features (std floored at 1e-8)."""
    return X.mean(axis=0), np.maximum(X.std(axis=0), 1e-8)


def standardize(X, scaler):
    """Apply a fitted standardizer; the same transform serves every split."""
    mean, std = scaler
    return (X - mean) / std


def predict(params, x):
    """FM prediction for one feature vector, via the O(dK) pairwise identity."""
    s = x @ params.V  # (K,)
    pairwise = 0.5 * float(s @ s - (x * x) @ np.sum(params.V * params.V, axis=1))
    return params.b + float(params.w @ x) + pairwise


_CHUNK = 8192  # block size for batch passes; keeps temporaries cache-sized


def predict_batch(params, X):
    out = np.empty(len(X))
    vsq = np.sum(params.V * params.V, axis=1)
    for s in range(0, len(X), _CHUNK):
        Xc = X[s : s + _CHUNK]
        S = Xc @ params.V  # (chunk, K)
        pairwise = 0.5 * (np.sum(S * S, axis=1) - (Xc * Xc) @ vsq)
        out[s : s + _CHUNK] = params.b + Xc @ params.w + pairwise
    return out


def predict_pairwise_reference(params, x):
    """Literal double sum over i < j; quadratic in d, used to pin the fast path."""
    total = params.b + float(params.w @ x)
    d = len(x)
    for i in range(d):
        for j in range(i + 1, d):
            total += float(params.V[i] @ params.V[j]) * x[i] * x[j]
    return total


def mse_loss(params, table):
    """Mean squared error over the table."""
    if len(table) == 0:
        raise ValueError("feature table is empty")
    err = predict_batch(params, table.X) - table.y
    return float(err @ err) / len(table)


def group_norms(z, layout):
    """Euclidean (vectors) or Frobenius (matrices) norm of every group block."""
    return np.array([np.linalg.norm(z[sl]) for sl in layout.slices()])


def reg_value(params, layout, cfg):
    """Value of the group penalty: plain norms in convex mode, log(1 + norm) under LSP."""
    eta_w, eta_v = cfg.resolved_etas(layout)
    tw = group_norms(params.w, layout)
    tv = group_norms(params.V, layout)
    if cfg.mode == "lsp":
        tw, tv = np.log1p(tw), np.log1p(tv)
    return cfg.lam_w * float(eta_w @ tw) + cfg.lam_v * float(eta_v @ tv)


def smooth_surplus(params, layout, cfg):
    """g = penalty minus kappa0 * convex envelope; identically 0 in convex mode."""
    if cfg.mode == "convex":
        return 0.0
    eta_w, eta_v = cfg.resolved_etas(layout)
    tw = group_norms(params.w, layout)
    tv = group_norms(params.V, layout)
    return cfg.lam_w * float(eta_w @ (np.log1p(tw) - cfg.kappa0 * tw)) + cfg.lam_v * float(
        eta_v @ (np.log1p(tv) - cfg.kappa0 * tv)
    )


def _surplus_grad_block(z, layout, lam, eta, kappa0):
    grad = np.zeros_like(z)
    if lam == 0.0:
        return grad
    for g, sl in enumerate(layout.slices()):
        t = np.linalg.norm(z[sl])
        if t > 0.0:
            # d/dz [kappa(t) - kappa0 * t] = (kappa'(t) - kappa0) * z / t
            grad[sl] = lam * eta[g] * (1.0 / (1.0 + t) - kappa0) / t * z[sl]
    return grad


def mse_grad(params, X, y):
    """Gradient of the mean squared error over the given samples."""
    n = len(y)
    grad_b = 0.0
    grad_w = np.zeros(params.d)
    grad_v = np.zeros_like(params.V)
    weighted = np.zeros(params.d)  # accumulates (X*X)ᵀ residual
    vsq = np.sum(params.V * params.V, axis=1)
    for s in range(0, n, _CHUNK):
        Xc = X[s : s + _CHUNK]
        S = Xc @ params.V
        Xsq = Xc * Xc
        residual = (params.b + Xc @ params.w + 0.5 * (np.sum(S * S, axis=1) - Xsq @ vsq)) - y[s : s + _CHUNK]
        grad_b += float(np.sum(residual))
        grad_w += Xc.T @ residual
        grad_v += Xc.T @ (residual[:, None] * S)
        weighted += Xsq.T @ residual
    grad_v -= params.V * weighted[:, None]
    scale = 2.0 / n
    return scale * grad_b, scale * grad_w, scale * grad_v


def augmented_grad(params, X, y, layout, cfg):
    """Gradient of the smooth augmented loss over a batch.

    Returns grad of the batch-mean squared error plus the gradient of the
    smooth surplus g (zero in convex mode, where the whole penalty lives in
    the proximal step).  Over the full sample this is exactly the gradient
    of the augmented objective, and mini-batches estimate it without bias.
    """
    grad_b, grad_w, grad_v = mse_grad(params, X, y)
    if cfg.mode == "lsp":
        eta_w, eta_v = cfg.resolved_etas(layout)
        grad_w = grad_w + _surplus_grad_block(params.w, layout, cfg.lam_w, eta_w, cfg.kappa0)
        grad_v = grad_v + _surplus_grad_block(params.V, layout, cfg.lam_v, eta_v, cfg.kappa0)
    return grad_b, grad_w, grad_v


def prox_group(z, layout, thresholds):
    """Blockwise shrinkage: each group scales by max(1 - threshold / norm, 0).

    Solves min_x 0.5 * ||x - z||^2 + sum_g threshold_g * ||x_g|| exactly;
    works on the weight vector and on the factor matrix alike.
    """
    out = z.copy()
    for g, sl in enumerate(layout.slices()):
        tau = thresholds[g]
        if tau < 0:
            raise ValueError("thresholds must be >= 0")
        if tau == 0.0:
            continue
        norm = np.linalg.norm(z[sl])
        out[sl] = 0.0 if norm <= tau else (1.0 - tau / norm) * z[sl]
    return out


def objective(params, table, layout, cfg):
    """Training objective: loss plus the (possibly nonconvex) group penalty."""
    return mse_loss(params, table) + reg_value(params, layout, cfg)


def augmented_objective(params, table, layout, cfg):
    """Loss + g plus kappa0-weighted convex penalty; equals :func:`objective` exactly."""
    eta_w, eta_v = cfg.resolved_etas(layout)
    convex = cfg.lam_w * float(eta_w @ group_norms(params.w, layout)) + cfg.lam_v * float(
        eta_v @ group_norms(params.V, layout)
    )
    return mse_loss(params, table) + smooth_surplus(params, layout, cfg) + cfg.kappa0 * convex


def param_nnz_ratio(params, tol=1e-10):
    """Fraction of first- and second-order entries above ``tol``; the bias is excluded."""
    nnz = int(np.sum(np.abs(params.w) > tol)) + int(np.sum(np.abs(params.V) > tol))
    return nnz / (params.d + params.d * params.K)


def save_model(path, params, layout, cfg):
    """Persist the model with its layout and regularizer config; round-trips bit-exactly."""
    header = {
        "d": params.d,
        "K": params.K,
        "groups": [list(g) for g in layout.groups],
        "reg": {
            "mode": cfg.mode,
            "lam_w": cfg.lam_w,
            "lam_v": cfg.lam_v,
            "eta_w": None if cfg.eta_w is None else np.asarray(cfg.eta_w).tolist(),
            "eta_v": None if cfg.eta_v is None else np.asarray(cfg.eta_v).tolist(),
            "kappa0": cfg.kappa0,
        },
    }
    np.savez(path, header=json.dumps(header), b=np.float64(params.b), w=params.w, V=params.V)


def load_model(path):
    data = np.load(path, allow_pickle=False)
    header = json.loads(str(data["header"]))
    params = FmParams(float(data["b"]), data["w"], data["V"])
    layout = GroupLayout(tuple(tuple(g) for g in header["groups"]), header["d"])
    reg = header["reg"]
    cfg = RegConfig(
        mode=reg["mode"],
        lam_w=reg["lam_w"],
        lam_v=reg["lam_v"],
        eta_w=None if reg["eta_w"] is None else np.asarray(reg["eta_w"]),
        eta_v=None if reg["eta_v"] is None else np.asarray(reg["eta_v"]),
        kappa0=reg["kappa0"],
    )
    return params, layout, cfg

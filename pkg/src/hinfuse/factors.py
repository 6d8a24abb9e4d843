"""Low-rank latent features from sparse similarity matrices.

Two routes produce per-metagraph user/item factors:

* :func:`factorize_mf` fits U Bᵀ to the observed entries with Frobenius
  regularization by full-batch gradient descent with backtracking.
* :func:`factorize_nnr` solves the nuclear-norm-regularized completion
  problem with an accelerated proximal-gradient loop whose prox step is
  singular value thresholding; the iterate is kept in factored SVD form
  and split as U = P Σ^{1/2}, B = Q Σ^{1/2} on exit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class OverRegularizedError(ValueError):
    """Shrinkage removed every component; nothing left to factor."""


@dataclass
class ObservedMatrix:
    """Entries of a partially observed matrix; positions define the mask."""

    shape: tuple
    row: np.ndarray
    col: np.ndarray
    val: np.ndarray

    @classmethod
    def from_similarity(cls, sim):
        coo = sim.matrix.tocoo()
        return cls(coo.shape, coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data.astype(np.float64))

    @classmethod
    def from_dense(cls, X, mask=None):
        X = np.asarray(X, dtype=np.float64)
        mask = np.ones(X.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        row, col = np.nonzero(mask)
        return cls(X.shape, row, col, X[row, col])

    @property
    def n_observed(self):
        return len(self.val)

    def user_observed(self):
        return np.bincount(self.row, minlength=self.shape[0]) > 0

    def item_observed(self):
        return np.bincount(self.col, minlength=self.shape[1]) > 0

    def to_csr(self):
        return sp.csr_matrix((self.val, (self.row, self.col)), shape=self.shape)


@dataclass
class FactorPair:
    """Per-metagraph user and item latent factors, U (m, F) and B (n, F)."""

    U: np.ndarray
    B: np.ndarray
    rank: int
    metagraph: str = ""
    method: str = "mf"
    user_observed: np.ndarray = None
    item_observed: np.ndarray = None
    objective_history: list = field(default_factory=list, repr=False)

    @property
    def n_users(self):
        return self.U.shape[0]

    @property
    def n_items(self):
        return self.B.shape[0]

    def truncate(self, max_rank):
        """Keep the first ``max_rank`` factor columns (NNR emits them by decreasing weight)."""
        if max_rank is None or self.rank <= max_rank:
            return self
        return FactorPair(
            self.U[:, :max_rank].copy(),
            self.B[:, :max_rank].copy(),
            max_rank,
            self.metagraph,
            self.method,
            self.user_observed,
            self.item_observed,
            self.objective_history,
        )


def mf_value_and_grad(U, B, obs, mu):
    """Objective and gradients of the regularized factorization problem.

    value = 0.5 * sum over observed (i,j) of ((U Bᵀ)_ij - R_ij)^2
            + 0.5 * mu * (||U||_F^2 + ||B||_F^2)
    """
    pred = np.einsum("ij,ij->i", U[obs.row], B[obs.col])
    err = pred - obs.val
    value = 0.5 * float(err @ err) + 0.5 * mu * (float(np.sum(U * U)) + float(np.sum(B * B)))
    E = sp.csr_matrix((err, (obs.row, obs.col)), shape=obs.shape)
    grad_u = E @ B + mu * U
    grad_b = E.T @ U + mu * B
    return value, grad_u, grad_b


def factorize_mf(obs, rank, mu=0.01, seed=0, tol=1e-5, max_iters=2000, name=""):
    """Factor an observed matrix as U Bᵀ by gradient descent with backtracking.

    Accepted steps never increase the objective; iteration stops once the
    relative objective change drops below ``tol``.
    """
    m, n = obs.shape
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if rank > min(m, n) / 2:
        raise ValueError(f"rank {rank} exceeds min(m, n)/2 = {min(m, n) / 2}")
    if obs.n_observed == 0:
        raise ValueError("no observed entries to factor")

    rng = np.random.default_rng(seed)
    scale = 0.1 / np.sqrt(rank)
    U = rng.normal(0.0, scale, (m, rank))
    B = rng.normal(0.0, scale, (n, rank))

    value, grad_u, grad_b = mf_value_and_grad(U, B, obs, mu)
    history = [value]
    step = 0.1
    for _ in range(max_iters):
        grad_sq = float(np.sum(grad_u * grad_u) + np.sum(grad_b * grad_b))
        if grad_sq == 0.0:
            break
        accepted = False
        for _ in range(40):
            U_new = U - step * grad_u
            B_new = B - step * grad_b
            value_new, gu_new, gb_new = mf_value_and_grad(U_new, B_new, obs, mu)
            if value_new <= value - 1e-4 * step * grad_sq:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        U, B = U_new, B_new
        relative = (value - value_new) / max(value, 1e-12)
        value, grad_u, grad_b = value_new, gu_new, gb_new
        history.append(value)
        step *= 1.3
        if relative < tol:
            break

    return FactorPair(
        U, B, rank, metagraph=name, method="mf",
        user_observed=obs.user_observed(), item_observed=obs.item_observed(),
        objective_history=history,
    )


def svt(X, tau):
    """Singular value thresholding: shrink each singular value by ``tau``.

    Returns the unique minimizer of 0.5 * ||Z - X||_F^2 + tau * ||Z||_*.
    """
    if tau < 0:
        raise ValueError(f"threshold must be >= 0, got {tau}")
    P, s, Qt = np.linalg.svd(np.asarray(X, dtype=np.float64), full_matrices=False)
    shrunk = np.maximum(s - tau, 0.0)
    return (P * shrunk) @ Qt


@dataclass
class NnrState:
    """Factored iterate X = P diag(sigma) Qᵀ of the completion solver."""

    P: np.ndarray
    sigma: np.ndarray
    Q: np.ndarray
    mu: float
    objective_history: list = field(default_factory=list)

    @property
    def rank(self):
        return len(self.sigma)

    def entries(self, row, col):
        """Values of the iterate at the given positions, in O(nnz * rank)."""
        if self.rank == 0:
            return np.zeros(len(row))
        return np.einsum("ij,ij->i", self.P[row] * self.sigma, self.Q[col])


class _LowRankPlusSparse:
    """Implicit  sum_k c_k P_k diag(s_k) Q_kᵀ  +  S  with matmat/rmatmat products."""

    def __init__(self, terms, S):
        self.terms = [(c, P, s, Q) for c, P, s, Q in terms if len(s) > 0 and c != 0.0]
        self.S = S

    def matmat(self, G):
        out = self.S @ G
        for c, P, s, Q in self.terms:
            out += c * (P @ (s[:, None] * (Q.T @ G)))
        return np.asarray(out)

    def rmatmat(self, G):
        out = self.S.T @ G
        for c, P, s, Q in self.terms:
            out += c * (Q @ (s[:, None] * (P.T @ G)))
        return np.asarray(out)

    def dense(self):
        out = np.asarray(self.S.todense())
        for c, P, s, Q in self.terms:
            out += c * ((P * s) @ Q.T)
        return out


def _partial_svd(op, m, n, k, rng, oversample=10, n_power=3):
    """Top-k singular triplets by randomized subspace iteration."""
    k = min(k, min(m, n))
    width = min(k + oversample, min(m, n))
    G = rng.standard_normal((n, width))
    Y = op.matmat(G)
    Q, _ = np.linalg.qr(Y)
    for _ in range(n_power):
        Z, _ = np.linalg.qr(op.rmatmat(Q))
        Q, _ = np.linalg.qr(op.matmat(Z))
    B = op.rmatmat(Q).T  # (width, n)
    Ub, s, Vt = np.linalg.svd(B, full_matrices=False)
    return (Q @ Ub)[:, :k], s[:k], Vt[:k].T


def _svt_of_operator(op, m, n, tau, rank_guess, rng, dense_cutoff):
    """SVT applied to an implicit matrix; retries with a larger subspace if needed."""
    if min(m, n) <= dense_cutoff:
        P, s, Qt = np.linalg.svd(op.dense(), full_matrices=False)
        Q = Qt.T
    else:
        k = max(rank_guess, 5)
        while True:
            P, s, Q = _partial_svd(op, m, n, k, rng)
            if len(s) and s[-1] > tau and k < min(m, n):
                k = min(2 * k, min(m, n))  # threshold not reached inside the subspace
                continue
            break
    keep = s > tau
    return P[:, keep], (s - tau)[keep], Q[:, keep]


def factorize_nnr(
    obs, mu, seed=0, tol=1e-5, max_iters=300, max_rank=None, dense_cutoff=200, name="",
    return_state=False,
):
    """Nuclear-norm-regularized completion by accelerated proximal gradient.

    The objective 0.5 * ||P_Omega(X - R)||_F^2 + mu * ||X||_* is nonincreasing
    across accepted iterates (momentum restarts on increase).  Returns a
    :class:`FactorPair` with U Bᵀ exactly equal to the final iterate
    (``return_state=True`` also hands back the factored iterate); pass
    ``max_rank`` to truncate the emitted features afterwards.
    """
    if mu <= 0:
        raise ValueError(f"mu must be > 0, got {mu}")
    if obs.n_observed == 0:
        raise ValueError("no observed entries to factor")
    m, n = obs.shape
    rng = np.random.default_rng(seed)

    empty = (np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0)))
    state = NnrState(*empty, mu=mu)
    prev = NnrState(*empty, mu=mu)

    def objective(st):
        err = st.entries(obs.row, obs.col) - obs.val
        return 0.5 * float(err @ err) + mu * float(np.sum(st.sigma))

    def prox_from(terms):
        """One proximal step at the point given by ``terms`` (step size 1, Lipschitz 1)."""
        coeffs = np.zeros(len(obs.val))
        for c, P, s, Q in terms:
            if len(s):
                coeffs += c * np.einsum("ij,ij->i", P[obs.row] * s, Q[obs.col])
        # Z = Y - P_Omega(Y - R)  =  Y + sparse correction at the observed entries
        S = sp.csr_matrix((obs.val - coeffs, (obs.row, obs.col)), shape=obs.shape)
        op = _LowRankPlusSparse(terms, S)
        guess = max(len(terms[0][2]) + 5, 10) if terms else 10
        return _svt_of_operator(op, m, n, mu, guess, rng, dense_cutoff)

    state.objective_history.append(objective(state))
    a_prev, a = 0.0, 1.0
    for it in range(max_iters):
        beta = (a_prev - 1.0) / a
        terms = [
            (1.0 + beta, state.P, state.sigma, state.Q),
            (-beta, prev.P, prev.sigma, prev.Q),
        ]
        P, s, Q = prox_from(terms)
        candidate = NnrState(P, s, Q, mu, state.objective_history)
        value = objective(candidate)
        if value > state.objective_history[-1] + 1e-12:
            # restart: plain proximal step from the current iterate is a descent step
            P, s, Q = prox_from([(1.0, state.P, state.sigma, state.Q)])
            candidate = NnrState(P, s, Q, mu, state.objective_history)
            value = objective(candidate)
            a_prev, a = 0.0, 1.0
        if it == 0 and candidate.rank == 0:
            raise OverRegularizedError(
                f"mu={mu} shrank every singular value to zero on the first step; reduce mu"
            )
        prev, state = state, candidate
        last = state.objective_history[-1]
        state.objective_history.append(value)
        a_prev, a = a, 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * a * a))
        if abs(last - value) / max(abs(last), 1e-12) < tol:
            break

    half = np.sqrt(state.sigma)
    pair = FactorPair(
        state.P * half, state.Q * half, state.rank, metagraph=name, method="nnr",
        user_observed=obs.user_observed(), item_observed=obs.item_observed(),
        objective_history=state.objective_history,
    )
    pair = pair.truncate(max_rank)
    return (pair, state) if return_state else pair


def save_factor_side(path, pair, side):
    """Persist one factor side ('user' or 'item') with its header fields."""
    matrix = pair.U if side == "user" else pair.B
    observed = pair.user_observed if side == "user" else pair.item_observed
    np.savez(
        path,
        matrix=matrix,
        observed=observed if observed is not None else np.ones(matrix.shape[0], dtype=bool),
        rank=pair.rank,
        metagraph=pair.metagraph,
        method=pair.method,
        side=side,
    )


def load_factor_pair(user_path, item_path):
    u = np.load(user_path, allow_pickle=False)
    b = np.load(item_path, allow_pickle=False)
    if str(u["metagraph"]) != str(b["metagraph"]) or int(u["rank"]) != int(b["rank"]):
        raise ValueError("factor sides disagree on metagraph or rank")
    return FactorPair(
        u["matrix"], b["matrix"], int(u["rank"]),
        metagraph=str(u["metagraph"]), method=str(u["method"]),
        user_observed=u["observed"], item_observed=b["observed"],
    )

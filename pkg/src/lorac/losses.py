"""Contrastive loss family with a low-rank-promoting nuclear-norm prior.

The per-instance loss classifies the positive key among K negatives with a
softmax over similarity logits, where the positive logit is shifted down by
the log of the prior density over the stacked view matrix Q:

    loss = -(1/(M-1)) * sum_m log  exp((q_m . k+  -  tau*r) / tau)
                                   -----------------------------------------
                                   exp((q_m . k+ - tau*r)/tau) + sum_j exp(q_m . k-_j / tau)

with r = -log h(Q) >= 0 the prior penalty.  Everything is evaluated in the
numerically stable logits form (shift the positive logit, then a standard
max-shifted softmax cross-entropy with the true class at index 0).

Supported prior hypotheses, with ``dim`` the row count of the penalized
matrix (M for Q, N*(M-1) for the batchwise P):

    laplace           r = |Q|_* / (dim * beta * tau)
    gaussian          r = |Q|_*^2 / (sigma2 * dim * tau)
    shifted_gaussian  r = (|Q|_* - c_o)^2 / (dim * beta * tau)
    margin_constant   r = c / (dim * beta * tau)
    none              r = 0   (identical to beta -> inf)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, ShapeError
from .linalg import jacobi_svd
from .tensor import (
    Tensor,
    concat_cols,
    concat_rows,
    logsumexp_rows,
    matmul,
    nuclear_norm,
    sum_all,
    take_rows,
)

PRIOR_KINDS = ("laplace", "gaussian", "shifted_gaussian", "margin_constant", "none")

# kinds whose penalty is scaled by 1/beta, so beta = inf switches them off
_BETA_KINDS = ("laplace", "shifted_gaussian", "margin_constant")


@dataclass(frozen=True)
class PriorConfig:
    """Which prior hypothesis is active, plus its hyperparameters."""

    kind: str = "laplace"
    beta: float = 1.0
    sigma2: float = 2.0
    c_o: float = math.sqrt(5.0)
    c: float = 3.0
    tau: float = 0.2

    def validate(self) -> None:
        if self.kind not in PRIOR_KINDS:
            raise ConfigError(f"unknown prior kind {self.kind!r}; expected one of {PRIOR_KINDS}")
        if self.tau <= 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.kind in _BETA_KINDS and not self.beta > 0.0:
            raise ConfigError(f"beta must be positive (or inf), got {self.beta}")
        if self.kind == "gaussian" and not self.sigma2 > 0.0:
            raise ConfigError(f"sigma2 must be positive, got {self.sigma2}")
        if self.c_o < 0.0:
            raise ConfigError(f"c_o must be non-negative, got {self.c_o}")

    def active(self) -> bool:
        """True when the penalty can be nonzero."""
        if self.kind == "none":
            return False
        if self.kind in _BETA_KINDS and math.isinf(self.beta):
            return False
        return True


@dataclass
class QMatrix:
    """Stack of M-1 query rows plus the (detached) positive-key row."""

    matrix: Tensor   # (M, d); gradient flows only through the query rows
    views: int       # M


def _check_unit_rows(arr: np.ndarray, what: str) -> None:
    norms = np.sqrt((arr * arr).sum(axis=-1))
    if not np.allclose(norms, 1.0, atol=1e-6):
        raise DegenerateInputError(f"{what} must have unit-norm rows")


def _as_row(t: Tensor | np.ndarray) -> Tensor:
    """Positive key as a detached (1, d) constant."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if data.ndim == 1:
        data = data[None, :]
    if data.ndim != 2 or data.shape[0] != 1:
        raise ShapeError(f"expected a single key vector, got shape {data.shape}")
    return Tensor(data)


def build_q(queries: Tensor, k_pos) -> QMatrix:
    """Stack queries and the positive key into the M x d view matrix.

    The key row is detached, so the prior's gradient reaches only the query
    rows.  Requires M <= d (unit rows then give |Q|_* in [sqrt(M), M]).
    """
    if queries.data.ndim != 2:
        raise ShapeError(f"queries must be (M-1, d), got {queries.shape}")
    key_row = _as_row(k_pos)
    if key_row.data.shape[1] != queries.data.shape[1]:
        raise ShapeError(
            f"key width {key_row.data.shape[1]} != query width {queries.data.shape[1]}")
    m = queries.data.shape[0] + 1
    if m < 2:
        raise ShapeError("Q needs at least one query row")
    if m > queries.data.shape[1]:
        raise ShapeError(f"Q needs M <= d, got M={m}, d={queries.data.shape[1]}")
    _check_unit_rows(queries.data, "queries")
    _check_unit_rows(key_row.data, "positive key")
    return QMatrix(matrix=concat_rows([queries, key_row]), views=m)


def _penalty(nuc: Tensor, dim: int, cfg: PriorConfig) -> Tensor:
    scale = dim * cfg.tau
    if cfg.kind == "laplace":
        return nuc * (1.0 / (cfg.beta * scale))
    if cfg.kind == "gaussian":
        return (nuc * nuc) * (1.0 / (cfg.sigma2 * scale))
    if cfg.kind == "shifted_gaussian":
        d = nuc - cfg.c_o
        return (d * d) * (1.0 / (cfg.beta * scale))
    if cfg.kind == "margin_constant":
        return Tensor(cfg.c / (cfg.beta * scale))
    raise ConfigError(f"unknown prior kind {cfg.kind!r}")


def prior_log_penalty(q: QMatrix, cfg: PriorConfig) -> Tensor:
    """r = -log h(Q), differentiable through the nuclear norm when active."""
    cfg.validate()
    if not cfg.active():
        return Tensor(0.0)
    return _penalty(nuclear_norm(q.matrix), q.views, cfg)


def prior_penalty_value(nuclear: float, dim: int, cfg: PriorConfig) -> float:
    """Plain-float twin of the penalty, for diagnostics and oracles."""
    cfg.validate()
    if not cfg.active():
        return 0.0
    scale = dim * cfg.tau
    if cfg.kind == "laplace":
        return nuclear / (cfg.beta * scale)
    if cfg.kind == "gaussian":
        return nuclear * nuclear / (cfg.sigma2 * scale)
    if cfg.kind == "shifted_gaussian":
        return (nuclear - cfg.c_o) ** 2 / (cfg.beta * scale)
    return cfg.c / (cfg.beta * scale)


def _negatives_const(negs) -> Tensor:
    data = negs.data if isinstance(negs, Tensor) else np.asarray(negs, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError(f"negatives must be (K, d), got shape {data.shape}")
    return Tensor(data)


def _nce_mean(queries: Tensor, k_pos: Tensor, negs: Tensor, r: Tensor, tau: float) -> Tensor:
    """Mean over query rows of the penalty-shifted softmax cross-entropy."""
    m = queries.data.shape[0]
    l_pos = matmul(queries, k_pos.T)           # (m, 1)
    z_pos = (l_pos - r * tau) / tau
    if negs.data.shape[0] > 0:
        z_neg = matmul(queries, negs.T) / tau  # (m, K)
        z = concat_cols([z_pos, z_neg])
    else:
        z = z_pos
    lse = logsumexp_rows(z)
    return (sum_all(lse) - sum_all(z_pos)) / float(m)


def info_nce(q, k_pos, negs, tau: float) -> Tensor:
    """Single-query contrastive loss: classify k+ among K+1 candidates.

    With K = 0 the softmax has one class and the loss is exactly 0.
    """
    if tau <= 0.0:
        raise ConfigError(f"tau must be positive, got {tau}")
    qt = q if isinstance(q, Tensor) else Tensor(np.asarray(q, dtype=np.float64))
    if qt.data.ndim == 1:
        qt = _reshape_row(qt)
    if qt.data.ndim != 2 or qt.data.shape[0] != 1:
        raise ShapeError(f"info_nce expects one query vector, got shape {qt.shape}")
    return _nce_mean(qt, _as_row(k_pos), _negatives_const(negs), Tensor(0.0), tau)


def _reshape_row(t: Tensor) -> Tensor:
    """View a length-d vector tensor as (1, d), keeping the tape link."""
    from .tensor import _record

    data = t.data[None, :]

    def bwd(g):
        return (g[0],)

    return _record("row", (t,), data, bwd)


def lorac_instance_loss(queries: Tensor, k_pos, negs, cfg: PriorConfig,
                        q_rows: Sequence[int] | None = None) -> Tensor:
    """Per-instance multi-query loss with the prior penalty on |Q|_*.

    ``q_rows`` optionally selects which query rows enter Q; all queries
    always contribute their similarity terms.
    """
    cfg.validate()
    if queries.data.ndim != 2 or queries.data.shape[0] < 1:
        raise ShapeError(f"queries must be (M-1, d) with M >= 2, got {queries.shape}")
    key_row = _as_row(k_pos)
    negs_t = _negatives_const(negs)
    if cfg.active():
        q_for_prior = queries if q_rows is None else take_rows(queries, list(q_rows))
        r = prior_log_penalty(build_q(q_for_prior, key_row), cfg)
    else:
        r = Tensor(0.0)
    return _nce_mean(queries, key_row, negs_t, r, cfg.tau)


def lorac_batch_loss(instances: Sequence[Tensor], keys, negs, cfg: PriorConfig,
                     q_rows: Sequence[int] | None = None) -> Tensor:
    """Mean of the per-instance losses over a batch.

    ``instances[i]`` holds the (M-1, d) queries of instance i; ``keys`` is
    the (N, d) stack of positive keys.
    """
    n = len(instances)
    if n == 0:
        raise ShapeError("empty batch")
    keys_arr = keys.data if isinstance(keys, Tensor) else np.asarray(keys, dtype=np.float64)
    if keys_arr.shape[0] != n:
        raise ShapeError(f"{n} instances but {keys_arr.shape[0]} keys")
    total = None
    for i in range(n):
        li = lorac_instance_loss(instances[i], keys_arr[i], negs, cfg, q_rows=q_rows)
        total = li if total is None else total + li
    return total / float(n)


def build_p(instances: Sequence[Tensor]) -> Tensor:
    """Stack of per-instance mean-centered query views, ((M-1)*N, d).

    Within each instance block the rows sum to (numerically) zero.
    """
    if not instances:
        raise ShapeError("empty batch")
    m1 = instances[0].data.shape[0]
    blocks = []
    for q in instances:
        if q.data.ndim != 2 or q.data.shape[0] != m1:
            raise ShapeError("all instances must share the same (M-1, d) shape")
        mean_row = matmul(Tensor(np.full((1, m1), 1.0 / m1)), q)
        blocks.append(q - mean_row)
    return concat_rows(blocks)


def lorac_bs_loss(instances: Sequence[Tensor], keys, negs, cfg: PriorConfig) -> Tensor:
    """Batchwise variant: one shared penalty on the centered-view stack P.

    The positive keys do not enter P; the penalty normalizer is N*(M-1).
    """
    cfg.validate()
    n = len(instances)
    if n == 0:
        raise ShapeError("empty batch")
    keys_arr = keys.data if isinstance(keys, Tensor) else np.asarray(keys, dtype=np.float64)
    if keys_arr.shape[0] != n:
        raise ShapeError(f"{n} instances but {keys_arr.shape[0]} keys")
    m1 = instances[0].data.shape[0]
    if cfg.active():
        r = _penalty(nuclear_norm(build_p(instances)), n * m1, cfg)
    else:
        r = Tensor(0.0)
    negs_t = _negatives_const(negs)
    total = None
    for i in range(n):
        li = _nce_mean(instances[i], _as_row(keys_arr[i]), negs_t, r, cfg.tau)
        total = li if total is None else total + li
    return total / float(n)


def loss_given_penalty(l_pos: np.ndarray, l_neg: np.ndarray, r: float, tau: float) -> float:
    """Loss value from raw similarities and a substituted penalty value.

    ``l_pos`` has shape (M-1,), ``l_neg`` shape (M-1, K).  Used to probe
    properties (e.g. monotonicity in r) with the similarity logits pinned.
    """
    l_pos = np.asarray(l_pos, dtype=np.float64)
    l_neg = np.asarray(l_neg, dtype=np.float64)
    z_pos = (l_pos - tau * r) / tau
    z = np.concatenate([z_pos[:, None], l_neg / tau], axis=1)
    mx = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - mx).sum(axis=1, keepdims=True)) + mx
    return float(np.mean(lse[:, 0] - z_pos))


def rewrite_consistency(queries, k_pos, negs, cfg: PriorConfig) -> float:
    """|softmax form - log(1 + sum exp(delta + r)) rewrite| of the loss.

    The two forms are algebraically identical; this diagnostic evaluates
    them along different floating-point paths and returns the deviation.
    """
    cfg.validate()
    q = queries.data if isinstance(queries, Tensor) else np.asarray(queries, dtype=np.float64)
    k = k_pos.data if isinstance(k_pos, Tensor) else np.asarray(k_pos, dtype=np.float64)
    k = k.reshape(-1)
    ng = negs.data if isinstance(negs, Tensor) else np.asarray(negs, dtype=np.float64)

    form_softmax = lorac_instance_loss(Tensor(q), k, ng, cfg).item()

    if cfg.active():
        nuc = float(jacobi_svd(np.vstack([q, k[None, :]])).S.sum())
        r = prior_penalty_value(nuc, q.shape[0] + 1, cfg)
    else:
        r = 0.0
    per_m = []
    for m in range(q.shape[0]):
        delta = (ng @ q[m]) / cfg.tau - float(q[m] @ k) / cfg.tau + r
        per_m.append(np.logaddexp.reduce(np.concatenate([[0.0], delta])))
    form_rewrite = float(np.mean(per_m))
    return abs(form_softmax - form_rewrite)


def moco_m_config(cfg: PriorConfig) -> PriorConfig:
    """The prior-off twin of a config (the multi-query baseline)."""
    return replace(cfg, kind="none")

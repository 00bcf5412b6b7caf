"""Finite-difference verification of every backward pass, as a run-anywhere
diagnostic (the CLI's ``gradcheck`` subcommand)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import encoder as encoder_mod
from . import losses as losses_mod
from . import tensor as tensor_mod
from .data import StreamKey
from .losses import PriorConfig
from .tensor import Tape, Tensor

FD_STEP = 1e-5


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                       step: float = FD_STEP) -> np.ndarray:
    """Entrywise central finite differences of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + step
        hi = f(x)
        xf[i] = orig - step
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * step)
    return g


def rel_error(got: np.ndarray, want: np.ndarray) -> float:
    """Frobenius-relative deviation, guarded for tiny references."""
    denom = max(float(np.sqrt((want * want).sum())), 1e-12)
    return float(np.sqrt(((got - want) ** 2).sum())) / denom


def matrix_with_distinct_singulars(m: int, n: int,
                                   rng: np.random.Generator) -> np.ndarray:
    """Random matrix whose singular values are well separated, so the
    nuclear-norm gradient is an honest derivative (no subgradient ties)."""
    r = min(m, n)
    u, _ = np.linalg.qr(rng.normal(size=(m, r)))
    v, _ = np.linalg.qr(rng.normal(size=(n, r)))
    s = np.linspace(r, 1.0, r) + rng.uniform(0.0, 0.2, size=r)
    return (u * s) @ v.T


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _autodiff_grad(build: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    tape = Tape()
    leaf = Tensor.param(x, tape)
    tape.backward(build(leaf))
    return leaf.grad


def _check(build: Callable[[Tensor], Tensor], x: np.ndarray) -> float:
    got = _autodiff_grad(build, x)
    want = central_difference(lambda a: build(Tensor(a)).item(), x.copy())
    return rel_error(got, want)


def _unit_rows(rng: np.random.Generator, m: int, d: int) -> np.ndarray:
    x = rng.normal(size=(m, d))
    return x / np.sqrt((x * x).sum(axis=1, keepdims=True))


def run_checks(seed: int = 0, sizes: tuple[tuple[int, int], ...] = ((4, 8), (8, 32)),
               trials: int = 5) -> list[CheckResult]:
    """The finite-difference suite: tensor ops, nuclear norm, losses, encoder."""
    results: list[CheckResult] = []

    rng = StreamKey(seed).child(99).generator()
    b_const = rng.normal(size=(4, 2))
    err = max(
        _check(lambda t: tensor_mod.sum_all(
            tensor_mod.matmul(t, Tensor(b_const))), rng.normal(size=(3, 4)))
        for _ in range(trials))
    results.append(CheckResult("matmul", err, 1e-6))

    w = rng.normal(size=(5, 8))
    err = max(
        _check(lambda t: tensor_mod.sum_all(
            tensor_mod.mul(tensor_mod.l2_normalize_rows(t), Tensor(w))),
            rng.normal(size=(5, 8)))
        for _ in range(trials))
    results.append(CheckResult("l2_normalize_rows", err, 1e-5))

    err = max(
        _check(lambda t: tensor_mod.sum_all(tensor_mod.logsumexp_rows(t)),
               rng.normal(size=(4, 6)))
        for _ in range(trials))
    results.append(CheckResult("logsumexp_rows", err, 1e-6))

    for m, d in sizes:
        err = max(
            _check(tensor_mod.nuclear_norm, matrix_with_distinct_singulars(m, d, rng))
            for _ in range(trials))
        results.append(CheckResult(f"nuclear_norm_{m}x{d}", err, 1e-4))

    cfg = PriorConfig(kind="laplace", beta=1.0, tau=0.2)
    m1, d, k = 4, 12, 6
    k_pos = _unit_rows(rng, 1, d)[0]
    negs = _unit_rows(rng, k, d)

    def loss_on_queries(t: Tensor) -> Tensor:
        return losses_mod.lorac_instance_loss(
            tensor_mod.l2_normalize_rows(t), k_pos, negs, cfg)

    err = max(_check(loss_on_queries, _unit_rows(rng, m1, d) * 1.3)
              for _ in range(trials))
    results.append(CheckResult("instance_loss_queries", err, 1e-4))

    pair = encoder_mod.make_encoder_pair(
        6, hidden=(8, 8), embed_dim=5, rng=StreamKey(seed).child(98).generator())
    x_in = rng.normal(size=(m1, 6))
    key_in = rng.normal(size=(1, 6))
    negs_e = _unit_rows(rng, k, 5)
    flat = pair.query.tensors()

    def encoder_loss(theta: np.ndarray) -> float:
        offset = 0
        for arr in flat:
            arr.reshape(-1)[:] = theta[offset:offset + arr.size]
            offset += arr.size
        q = encoder_mod.forward_query(pair, x_in)
        kv = encoder_mod.forward_key(pair, key_in)
        return losses_mod.lorac_instance_loss(q, kv.data[0], negs_e, cfg).item()

    theta0 = np.concatenate([a.reshape(-1) for a in flat])

    def encoder_autodiff(theta: np.ndarray) -> np.ndarray:
        offset = 0
        for arr in flat:
            arr.reshape(-1)[:] = theta[offset:offset + arr.size]
            offset += arr.size
        tape = Tape()
        attached = encoder_mod.attach_params(pair.query, tape)
        q = encoder_mod.mlp_forward(attached, Tensor(x_in))
        kv = encoder_mod.forward_key(pair, key_in)
        loss = losses_mod.lorac_instance_loss(q, kv.data[0], negs_e, cfg)
        tape.backward(loss)
        return np.concatenate([t.grad.reshape(-1) for t in attached.all()])

    got = encoder_autodiff(theta0.copy())
    want = central_difference(encoder_loss, theta0.copy())
    encoder_loss(theta0)  # restore parameters
    results.append(CheckResult("encoder_composite", rel_error(got, want), 1e-4))

    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max rel err':>12}  {'tol':>8}  status"]
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {r.max_rel_err:>12.3e}  {r.tol:>8.0e}  {status}")
    return "\n".join(lines)

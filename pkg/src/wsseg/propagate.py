"""Inference-time label propagation: solve (gamma I + L) Z~ = gamma Z column by column."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import ValidationError
from .graph import AffinityGraph

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PropagationResult:
    refined: np.ndarray
    predicted: np.ndarray
    residual: float
    ridge: float = 0.0  # extra diagonal shift applied after a near-singular first attempt
    method: str = "cg"


def _relative_residual(a, x, rhs) -> float:
    denom = np.linalg.norm(rhs)
    r = np.linalg.norm(a @ x - rhs)
    return float(r / denom) if denom > 0 else float(r)


def _solve(a, rhs, method, tol, maxiter):
    x = np.zeros_like(rhs)
    for j in range(rhs.shape[1]):
        b = rhs[:, j]
        if not np.any(b):
            continue
        if method == "cg":
            x[:, j], _ = spla.cg(a, b, rtol=tol, atol=0.0, maxiter=maxiter)
        elif method == "minres":
            x[:, j], _ = spla.minres(a, b, rtol=tol, maxiter=maxiter)
        else:
            raise AssertionError(method)
    return x


def _lu_solve(a, rhs):
    with warnings.catch_warnings():
        warnings.simplefilter("error", spla.MatrixRankWarning)
        try:
            return spla.splu(a.tocsc()).solve(rhs)
        except (RuntimeError, spla.MatrixRankWarning) as exc:
            raise SolverError(str(exc)) from None


def propagate(logits: np.ndarray, graph: AffinityGraph, gamma: float = 1.0,
              tol: float = 1e-8) -> PropagationResult:
    """Refine logits along the graph; ``predicted`` is the row argmax (lowest index on ties)."""
    if not gamma > 0:
        raise ValidationError("gamma must be positive")
    z = np.asarray(logits, dtype=np.float64)
    n = z.shape[0]
    if graph.n != n:
        raise ValidationError(f"graph has {graph.n} nodes, logits have {n} rows")
    lap = graph.laplacian
    rhs = gamma * z
    if graph.nnz == 0:
        refined = z.copy()
        return PropagationResult(refined, np.argmax(refined, axis=1), 0.0, 0.0, "identity")

    maxiter = 10 * n
    symmetric = graph.is_symmetric
    if symmetric and not graph.has_negative:
        method = "cg"  # gamma I + L is SPD here
    elif symmetric:
        method = "minres"  # must-not-link entries can make L indefinite
    else:
        method = "lu"

    def attempt(ridge):
        a = (sp.identity(n, format="csr") * (gamma + ridge) + lap).tocsr()
        used = method
        if method != "lu":
            # aim below tol: the solution error can exceed the residual by cond(a)
            x = _solve(a, rhs, method, tol * 1e-2, maxiter)
            res = _relative_residual(a, x, rhs)
            if np.all(np.isfinite(x)) and res <= tol:
                return x, res, used
            used = "lu"
        try:
            x = _lu_solve(a, rhs)
        except SolverError:
            return None, np.inf, used
        res = _relative_residual(a, x, rhs)
        if not np.all(np.isfinite(x)) or res > tol:
            return None, res, used
        return x, res, used

    ridge = 0.0
    x, res, used = attempt(ridge)
    if x is None:
        ridge = 1e-8 * float(abs(lap).sum(axis=1).max())
        log.warning("near-singular propagation system; retrying with ridge %.3g", ridge)
        x, res, used = attempt(ridge)
        if x is None:
            raise SolverError(f"propagation failed (residual {res:.3g}, ridge {ridge:.3g})")
    return PropagationResult(x, np.argmax(x, axis=1), res, ridge, used)


def propagate_dense_oracle(logits: np.ndarray, graph: AffinityGraph, gamma: float = 1.0) -> np.ndarray:
    """Direct dense solve of gamma (gamma I + L)^-1 Z; reference for tests (N <= 2000)."""
    z = np.asarray(logits, dtype=np.float64)
    n = z.shape[0]
    if n > 2000:
        raise ValidationError("dense oracle limited to N <= 2000")
    a = gamma * np.eye(n) + graph.laplacian.toarray()
    try:
        with warnings.catch_warnings():
            # singularity is reported below as SolverError
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu = scipy.linalg.lu_factor(a, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(str(exc)) from None
    if np.any(np.diag(lu[0]) == 0):
        raise SolverError("singular matrix")
    return scipy.linalg.lu_solve(lu, gamma * z)

"""Maximum-likelihood hyperparameter search.

Limited-memory BFGS ascent in log-parameter space with a backtracking
(Armijo) line search. Trial points whose precision fails to factorize are
treated as infeasible and the step is halved.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import baselines, engine
from .errors import InfeasibleStart
from .kernels import Kernel

log = logging.getLogger(__name__)

__all__ = ["OptimizeResult", "optimize_hyperparameters", "objective"]

GRAD_TOL = 1e-6
REL_TOL = 1e-10
MAX_LOG_STEP = 3.0  # no single step moves a parameter by more than e^3


@dataclass
class OptimizeResult:
    kernel: Kernel
    noise: float
    mll: float
    iterations: int
    converged: bool
    message: str
    line_search_failed: bool = False
    n_evals: int = 0
    trace: list = field(default_factory=list)  # (params incl. noise, mll) per accepted point

    @property
    def mll_trace(self) -> np.ndarray:
        return np.array([m for _, m in self.trace])

    @property
    def params(self) -> np.ndarray:
        return np.append(self.kernel.params(), self.noise)


def objective(data, kernel: Kernel, method: str = "spingp", **kw):
    """Return ``f(log_params) -> (mll, grad)`` with the noise variance last."""
    if method == "spingp":
        def ev(k, s2):
            return engine.mll_and_gradient(data, k, None, s2, **kw)
    elif method == "kf":
        def ev(k, s2):
            return baselines.kf_mll_and_gradient(data, k, s2)
    elif method == "dense":
        def ev(k, s2):
            return baselines.dense_gp_mll_and_gradient(data, k, None, s2)
    else:
        raise ValueError(f"unknown method {method!r}")

    def f(z):
        x = np.exp(z)
        mll, g = ev(kernel.with_params(x[:-1]), x[-1])
        return float(mll), np.asarray(g, dtype=float)

    return f


def _two_loop(g, memory):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(memory):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if memory:
        s, y, _ = memory[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(memory, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _safe_eval(f, z):
    try:
        mll, g = f(z)
    except (np.linalg.LinAlgError, FloatingPointError, ValueError, OverflowError):
        return None
    if not (np.isfinite(mll) and np.all(np.isfinite(g))):
        return None
    return mll, g


def optimize_hyperparameters(
    data,
    kernel: Kernel,
    noise0: float,
    budget: int = 200,
    method: str = "spingp",
    memory: int = 10,
    max_backtracks: int = 40,
    **kw,
) -> OptimizeResult:
    """Maximize the MLL over kernel hyperparameters and noise variance.

    ``budget`` bounds the number of iterations. The returned point is the
    best one seen; ``trace`` holds every accepted point, so its MLL values
    never decrease.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    x0 = np.append(kernel.params(), float(noise0))
    if not np.all(x0 > 0):
        raise InfeasibleStart("starting hyperparameters must be positive")
    f = objective(data, kernel, method, **kw)
    z = np.log(x0)
    first = _safe_eval(f, z)
    if first is None:
        raise InfeasibleStart("MLL is not computable at the starting hyperparameters")
    mll, g = first
    n_evals = 1
    trace = [(np.exp(z), mll)]
    hist: deque = deque(maxlen=memory)
    converged, ls_failed, message = False, False, "budget exhausted"
    it = 0
    while it < budget:
        if np.max(np.abs(g)) < GRAD_TOL:
            converged, message = True, "gradient norm below tolerance"
            break
        # ascent direction: H g with H approximating the inverse negative Hessian
        d = _two_loop(g, hist)
        if d @ g <= 0:
            hist.clear()
            d = g.copy()
        step = 1.0
        biggest = np.max(np.abs(d))
        if biggest > MAX_LOG_STEP:
            step = MAX_LOG_STEP / biggest
        if not hist:
            step = min(step, 1.0 / max(biggest, 1e-12))
        accepted = None
        for _ in range(max_backtracks):
            trial = z + step * d
            res = _safe_eval(f, trial)
            n_evals += 1
            if res is not None and res[0] >= mll + 1e-4 * step * (g @ d):
                accepted = (trial, *res)
                break
            step *= 0.5
        it += 1
        if accepted is None and hist:
            # stale curvature pairs can point nowhere useful; retry along g
            hist.clear()
            continue
        if accepted is None:
            ls_failed, message = True, "line search failed"
            log.warning("line search failed at iteration %d; returning best point", it)
            break
        z_new, mll_new, g_new = accepted
        s, y = z_new - z, g - g_new  # y from the negative gradient so s.y > 0 near a maximum
        if s @ y > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            hist.append((s, y, 1.0 / (s @ y)))
        rel = abs(mll_new - mll) / max(abs(mll), 1e-300)
        z, mll, g = z_new, mll_new, g_new
        trace.append((np.exp(z), mll))
        if rel < REL_TOL:
            converged, message = True, "relative MLL change below tolerance"
            break
    x = np.exp(z)
    return OptimizeResult(
        kernel=kernel.with_params(x[:-1]),
        noise=float(x[-1]),
        mll=float(mll),
        iterations=it,
        converged=converged,
        message=message,
        line_search_failed=ls_failed,
        n_evals=n_evals,
        trace=trace,
    )

"""Smooth unconstrained minimisation and finite-difference gradient checks."""

from dataclasses import dataclass, field

import numpy as np


class OptimizerError(RuntimeError):
    """Raised when the objective or gradient stops being finite.

    ``last_x`` / ``last_fun`` hold the last point at which both were finite.
    """

    def __init__(self, message, last_x, last_fun):
        super().__init__(message)
        self.last_x = last_x
        self.last_fun = last_fun


class ConvergenceError(RuntimeError):
    """Raised by model fitters whose optimum does not exist (e.g. separation)."""


@dataclass
class OptimizerConfig:
    max_iterations: int = 1000
    gtol: float = 1e-8
    initial_step: float = 1.0
    backtrack: float = 0.5
    c1: float = 1e-4
    method: str = "lbfgs"
    memory: int = 10
    ftol: float = 0.0

    def __post_init__(self):
        if self.gtol <= 0:
            raise ValueError("gtol must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")
        if not 0 < self.c1 < 1:
            raise ValueError("sufficient-decrease constant must lie in (0, 1)")
        if self.method not in ("lbfgs", "gd"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    converged: bool
    message: str
    history: list = field(default_factory=list)

    @property
    def grad_norm(self):
        return float(np.max(np.abs(self.grad))) if self.grad.size else 0.0


def _two_loop(g, s_list, y_list):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_list), reversed(y_list)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((a, rho))
        q -= a * y
    s, y = s_list[-1], y_list[-1]
    q *= (s @ y) / (y @ y)
    for (a, rho), s, y in zip(reversed(alphas), s_list, y_list):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


STALL_ITERATIONS = 10


def minimize(fun, x0, config=None):
    """Minimise ``fun`` from ``x0``; ``fun(x)`` returns ``(value, gradient)``.

    Every accepted step satisfies the Armijo sufficient-decrease condition, so
    the objective sequence in ``history`` is non-increasing.  ``method='gd'`` is
    steepest descent with backtracking; ``'lbfgs'`` uses limited-memory BFGS
    directions with the same backtracking search and falls back to steepest
    descent whenever the quasi-Newton direction fails.  Convergence is declared
    when the max-norm of the gradient is at most ``gtol``.  The run also stops
    (unconverged) after ten consecutive steps that leave the objective
    unchanged up to rounding.

    Trial points with a non-finite objective are treated as failed steps and
    shrunk; a non-finite gradient at a point with finite objective raises
    :class:`OptimizerError` carrying the last valid point.
    """
    cfg = config or OptimizerConfig()
    x = np.array(x0, dtype=float).ravel()
    f, g = fun(x)
    f = float(f)
    g = np.asarray(g, dtype=float).ravel()
    if not np.isfinite(f):
        raise OptimizerError("objective is not finite at the starting point", x.copy(), f)
    if not np.all(np.isfinite(g)):
        raise OptimizerError("gradient is not finite at the starting point", x.copy(), f)

    history = [f]
    s_list, y_list = [], []
    t_prev = None
    stalled = 0
    message = "maximum iterations reached"
    converged = False
    n_iter = 0
    for n_iter in range(cfg.max_iterations + 1):
        if x.size == 0 or np.max(np.abs(g)) <= cfg.gtol:
            converged = True
            message = "gradient tolerance reached"
            break
        if n_iter == cfg.max_iterations:
            break

        accepted = False
        for attempt in range(2):
            if cfg.method == "lbfgs" and s_list and attempt == 0:
                d = _two_loop(g, s_list, y_list)
                t = 1.0
                if not np.all(np.isfinite(d)) or d @ g >= 0:
                    s_list.clear()
                    y_list.clear()
                    continue
            else:
                d = -g
                if cfg.method == "gd" and t_prev is not None:
                    t = min(2.0 * t_prev, 1e10)
                else:
                    t = cfg.initial_step * min(1.0, 1.0 / np.linalg.norm(g))
            slope = float(d @ g)
            while t > 1e-20:
                x_new = x + t * d
                f_new, g_new = fun(x_new)
                f_new = float(f_new)
                if np.isfinite(f_new) and f_new <= f + cfg.c1 * t * slope:
                    accepted = True
                    break
                t *= cfg.backtrack
            if accepted:
                break
            s_list.clear()
            y_list.clear()
            if cfg.method == "gd":
                break
        if not accepted:
            message = "line search failed to find a decrease"
            break

        g_new = np.asarray(g_new, dtype=float).ravel()
        if not np.all(np.isfinite(g_new)):
            raise OptimizerError("gradient became non-finite", x.copy(), f)
        s = x_new - x
        y = g_new - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_list.append(s)
            y_list.append(y)
            if len(s_list) > cfg.memory:
                s_list.pop(0)
                y_list.pop(0)
        decrease = f - f_new
        x, f, g, t_prev = x_new, f_new, g_new, t
        history.append(f)
        if cfg.ftol > 0 and decrease <= cfg.ftol * max(1.0, abs(f)):
            converged = np.max(np.abs(g)) <= cfg.gtol
            message = "relative decrease below ftol"
            n_iter += 1
            break
        # accepted steps that no longer move f beyond rounding noise
        stalled = stalled + 1 if decrease <= 1e-14 * max(1.0, abs(f)) else 0
        if stalled >= STALL_ITERATIONS:
            message = "stalled at machine precision"
            n_iter += 1
            break
    return OptimizeResult(x=x, fun=f, grad=g, n_iter=n_iter, converged=bool(converged),
                          message=message, history=history)


def check_gradient(fun, grad, point, step=1e-5):
    """Max over coordinates of ``|a - fd| / max(1, |a|, |fd|)``.

    ``a`` is the analytic gradient and ``fd`` the central finite difference
    with step ``step``.  ``fun`` returns a scalar; ``grad`` returns a vector.
    """
    x = np.array(point, dtype=float).ravel()
    a = np.asarray(grad(x), dtype=float).ravel()
    fd = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        fd[j] = (float(fun(x + e)) - float(fun(x - e))) / (2.0 * step)
    if x.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(fd)))
    return float(np.max(np.abs(a - fd) / denom))

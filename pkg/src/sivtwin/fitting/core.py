"""Levenberg-Marquardt least squares with analytic Jacobians.

Positive parameters (widths, rates, lifetimes) are optimised in log space so
intermediate iterates never leave the physical domain.  Uncertainties come
from the curvature J^T W J at the optimum in natural parameters, scaled by
the reduced chi-square.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MAX_ITER = 200
XTOL = 1e-8
FTOL = 1e-10


class FitError(RuntimeError):
    """A fit could not be started or did not produce a usable result."""

    def __init__(self, msg: str, diagnostics: dict | None = None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class Model:
    """A parametric model ``f(x, p)`` with analytic Jacobian ``jac(x, p)``.

    ``jac`` returns an array of shape (len(x), len(p)).
    """

    name: str
    params: tuple[str, ...]
    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray, np.ndarray], np.ndarray]
    positive: tuple[str, ...] = ()

    def __call__(self, x, p):
        return self.func(np.asarray(x, dtype=float), np.asarray(p, dtype=float))


@dataclass
class FitResult:
    params: dict[str, float]
    uncertainties: dict[str, float]
    residual_norm: float
    converged: bool
    n_iterations: int
    model: str = ""
    chi2_red: float = float("nan")
    covariance: np.ndarray | None = field(default=None, repr=False)
    extras: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.params[key]

    def err(self, key) -> float:
        return self.uncertainties[key]

    def to_record(self) -> dict:
        rec = {"model": self.model,
               "params": {k: float(v) for k, v in self.params.items()},
               "uncertainties": {k: float(v) for k, v in self.uncertainties.items()},
               "residual_norm": float(self.residual_norm),
               "chi2_red": float(self.chi2_red),
               "converged": bool(self.converged),
               "n_iterations": int(self.n_iterations)}
        extras = {k: v for k, v in self.extras.items()
                  if k != "cost_history" and isinstance(v, (int, float, str, bool, list))}
        if extras:
            rec["extras"] = extras
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "FitResult":
        return cls(params=dict(rec["params"]), uncertainties=dict(rec["uncertainties"]),
                   residual_norm=rec["residual_norm"], converged=rec["converged"],
                   n_iterations=rec["n_iterations"], model=rec.get("model", ""),
                   chi2_red=rec.get("chi2_red", float("nan")), extras=rec.get("extras", {}))


def finite_difference_jacobian(model: Model, x, p, rel_step=1e-6) -> np.ndarray:
    """Central differences, step ``rel_step * max(|p_j|, 1e-12)``."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    J = np.empty((x.size, p.size))
    for j in range(p.size):
        h = rel_step * max(abs(p[j]), 1e-12)
        pp, pm = p.copy(), p.copy()
        pp[j] += h
        pm[j] -= h
        J[:, j] = (model.func(x, pp) - model.func(x, pm)) / (2 * h)
    return J


def least_squares(model: Model, p0: Sequence[float] | dict, x, y, sigma=None,
                  fixed: Sequence[str] = (), max_iter: int = MAX_ITER) -> FitResult:
    """Weighted nonlinear least squares, minimising sum(((y - f) / sigma)^2)."""
    # trial steps may overflow; such steps are simply rejected
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _least_squares(model, p0, x, y, sigma, fixed, max_iter)


def _least_squares(model, p0, x, y, sigma, fixed, max_iter):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if isinstance(p0, dict):
        p0 = [p0[k] for k in model.params]
    p0 = np.asarray(p0, dtype=float)
    if p0.size != len(model.params):
        raise ValueError(f"{model.name}: expected {len(model.params)} parameters")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise FitError("non-finite data")
    w = np.ones_like(y) if sigma is None else 1.0 / np.asarray(sigma, dtype=float)
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise FitError("sigma must be finite and > 0")

    free = np.array([k not in fixed for k in model.params])
    n_free = int(free.sum())
    if y.size < n_free:
        raise FitError(f"{model.name}: {y.size} points for {n_free} free parameters")
    is_log = np.array([k in model.positive for k in model.params]) & free
    if np.any(p0[is_log] <= 0):
        raise FitError(f"{model.name}: positive parameters need positive initial values",
                       {"p0": p0.tolist()})

    def to_nat(q):
        p = p0.copy()
        qq = q.copy()
        qq[is_log[free]] = np.exp(qq[is_log[free]])
        p[free] = qq
        return p

    def resid_and_jac(q):
        p = to_nat(q)
        f = model.func(x, p)
        r = (y - f) * w
        J = model.jac(x, p)[:, free] * w[:, None]
        # chain rule for log parameters: d/dlog(p) = p d/dp
        J = J * np.where(is_log[free], p[free], 1.0)[None, :]
        return r, J

    q = p0[free].copy()
    q[is_log[free]] = np.log(q[is_log[free]])
    r, J = resid_and_jac(q)
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise FitError(f"{model.name}: non-finite residual at the initial point")
    lam = 1e-3
    converged = False
    it = 0
    history = [cost]
    for it in range(1, max_iter + 1):
        g = J.T @ r
        A = J.T @ J
        diag = np.diag(A).copy()
        diag[diag <= 0] = 1.0
        accepted = False
        for _ in range(30):
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            q_new = q + step
            r_new, J_new = resid_and_jac(q_new)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new <= cost:
                accepted = True
                break
            lam *= 10
        if not accepted:
            # no downhill step even at huge damping: stationary to working precision
            converged = True
            break
        dq = np.abs(step) / (np.abs(q) + XTOL)
        dcost = (cost - cost_new) / max(cost, 1e-300)
        q, r, J, cost = q_new, r_new, J_new, cost_new
        history.append(cost)
        lam = max(lam / 10, 1e-12)
        if np.max(dq) < XTOL or dcost < FTOL or cost == 0.0:
            converged = True
            break

    p = to_nat(q)
    dof = max(y.size - n_free, 1)
    chi2_red = cost / dof
    Jn = model.jac(x, p)[:, free] * w[:, None]
    cov = np.full((p.size, p.size), np.nan)
    try:
        c = np.linalg.inv(Jn.T @ Jn)
        scale = chi2_red if y.size > n_free else 1.0
        cf = c * scale
        idx = np.flatnonzero(free)
        cov[np.ix_(idx, idx)] = cf
    except np.linalg.LinAlgError:
        log.warning("%s: singular curvature matrix, uncertainties undefined", model.name)
    errs = np.sqrt(np.abs(np.diag(cov)))
    errs[~free] = 0.0
    return FitResult(params=dict(zip(model.params, map(float, p))),
                     uncertainties=dict(zip(model.params, map(float, errs))),
                     residual_norm=float(np.sqrt(cost)), converged=converged,
                     n_iterations=it, model=model.name, chi2_red=float(chi2_red),
                     covariance=cov,
                     extras={"cost_history": history,
                             "gradient_norm": float(np.linalg.norm(Jn.T @ r))})

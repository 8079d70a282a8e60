"""Learning the follower response model from logged interactions.

Fits the response parameters by minimizing the empirical suboptimality loss:
the mean squared mismatch between leader-objective values at observed
responses and at the model-predicted responses.  The projection inside the
predicted response is replaced by its softplus-smoothed version during
optimization so the loss is differentiable; the reported loss is always
evaluated on the exact projection.

The residual Jacobian never needs materializing: with the sensitivity
vectors s_k = (I + H_k)^{-1} grad_x J0, row k is the concatenation of
-s_k y_k' and s_k, so all least-squares algebra reduces to small Gram
matrices over the data points.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .game_model import LeaderParams, eval_leader_objective
from .qp_engine import (Polyhedron, PolyhedronProjector, QpError,
                        SmoothedProjector)


@dataclass
class FitConfig:
    beta_fit: float = 1e-3
    max_iters: int = 60
    restarts: int = 1
    step_rule: str = "lm"            # "lm" (damped Gauss-Newton) or "gd"
    reg_weight: float = 0.0          # ridge on the fitted parameters
    loss_tol: float = 1e-18
    rel_tol: float = 1e-10
    inner_grad_tol: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if self.beta_fit <= 0:
            raise ValueError("beta_fit must be positive")
        if self.max_iters < 1 or self.restarts < 1:
            raise ValueError("max_iters and restarts must be >= 1")
        if self.step_rule not in ("lm", "gd"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be nonnegative")


@dataclass
class FitResult:
    theta_a_hat: np.ndarray
    theta_b_hat: np.ndarray
    loss: float                      # on the exact projection
    residuals: np.ndarray            # per-point, exact projection
    response_error: float            # max in-sample ||xhat(y_k) - x_k||
    loss_history: list[float]
    iterations: int
    status: str                      # converged | max_iters | warning
    h_hat: np.ndarray | None = None

    def to_json(self, path):
        obj = {
            "theta_a": [list(row) for row in self.theta_a_hat],
            "theta_b": list(self.theta_b_hat),
            "loss": self.loss,
            "residuals": list(self.residuals),
            "response_error": self.response_error,
            "loss_history": list(self.loss_history),
            "iterations": self.iterations,
            "status": self.status,
        }
        if self.h_hat is not None:
            obj["h_hat"] = list(self.h_hat)
        with open(path, "w") as fh:
            json.dump(obj, fh)


def _records_of(dataset):
    return dataset.records if hasattr(dataset, "records") else list(dataset)


def suboptimality_loss(theta_a_hat: np.ndarray, theta_b_hat: np.ndarray,
                       dataset, leader: LeaderParams,
                       feasible: Polyhedron) -> float:
    """Mean over the data of (J0 at observed x - J0 at predicted x)^2,
    with the prediction given by the exact projection."""
    records = _records_of(dataset)
    if not records:
        raise ValueError("dataset is empty")
    projector = PolyhedronProjector(feasible)
    total = 0.0
    for rec in records:
        u = theta_a_hat @ rec.y - theta_b_hat
        xhat = projector.project(u).solution
        diff = eval_leader_objective(rec.y, rec.x, leader) - \
            eval_leader_objective(rec.y, xhat, leader)
        total += diff * diff
    return total / len(records)


def learn_h(dataset, G: np.ndarray, slack: float = 0.0) -> np.ndarray:
    """Tightest offsets consistent with the observed responses:
    h_j = max_k (G x_k)_j + slack."""
    records = _records_of(dataset)
    if not records:
        raise ValueError("dataset is empty")
    X = np.array([r.x for r in records])
    return np.max(X @ np.asarray(G, dtype=float).T, axis=0) + slack


class _SmoothedResponses:
    """Smoothed predictions and sensitivity vectors for all data points,
    with per-point warm starts across parameter updates.

    Duplicate pre-projection points (e.g. under the zero-sensitivity initial
    model every data point shares one) are solved once.
    """

    def __init__(self, Y, grad_x_rows, feasible, beta, grad_tol,
                 warm_init=None):
        self.Y = Y                      # m x T
        self.gx = grad_x_rows           # m x d, rows grad_x J0(y_k, .)
        self.projector = SmoothedProjector(feasible, beta)
        self.grad_tol = grad_tol
        if warm_init is None:
            self.warm = [None] * Y.shape[0]
        else:
            self.warm = [warm_init[k].copy() for k in range(Y.shape[0])]

    def predict(self, theta_a, theta_b, need_sensitivity):
        m = self.Y.shape[0]
        d = theta_b.shape[0]
        X = np.empty((m, d))
        S = np.empty((m, d)) if need_sensitivity else None
        U = self.Y @ theta_a.T - theta_b   # m x d pre-projection points
        cache: dict[bytes, tuple] = {}
        for k in range(m):
            key = U[k].tobytes()
            hit = cache.get(key)
            if hit is None:
                hit = self.projector.project_full(
                    U[k], grad_tol=self.grad_tol, max_iter=400,
                    x0=self.warm[k])
                cache[key] = hit
            x, info = hit
            self.warm[k] = x
            X[k] = x
            if need_sensitivity:
                S[k] = info.solve(self.gx[k])
        return X, S


def fit(dataset, leader: LeaderParams, feasible: Polyhedron,
        config: FitConfig | None = None,
        init: tuple | None = None) -> FitResult:
    """Fit (theta_a, theta_b) by minimizing the empirical suboptimality loss.

    Optimizes the smoothed surrogate with analytic sensitivities (implicit
    differentiation of the smoothed projection's optimality condition); the
    default outer step is damped Gauss-Newton in residual space.  `init`
    warm-starts from a previous fit; otherwise the zero-sensitivity model
    (theta_a = 0, theta_b = -mean response) seeds the first restart and
    random perturbations seed the others.
    """
    config = config or FitConfig()
    records = _records_of(dataset)
    if not records:
        raise ValueError("dataset is empty")
    Y = np.array([r.y for r in records])
    X_obs = np.array([r.x for r in records])
    m, T = Y.shape
    d = X_obs.shape[1]
    distinct = len({y.tobytes() for y in Y})
    if distinct < T + 1:
        warnings.warn(
            f"only {distinct} distinct tariffs for a horizon-{T} fit; the "
            "problem is underdetermined and recovery is not identifiable",
            stacklevel=2)

    J_obs = np.array([eval_leader_objective(r.y, r.x, leader) for r in records])
    grad_rows = np.array([leader.grad_in_x(r.y) for r in records])
    # J0 is affine in the response: J0(y, x) = grad_x' x + c(y).
    c_terms = np.array([eval_leader_objective(r.y, np.zeros(d), leader)
                        for r in records])
    rng = np.random.Generator(np.random.Philox(config.seed))

    starts = []
    if init is not None:
        starts.append((np.asarray(init[0], dtype=float).copy(),
                       np.asarray(init[1], dtype=float).copy()))
    base_b = -np.mean(X_obs, axis=0)
    if not starts:
        starts.append((np.zeros((d, T)), base_b.copy()))
    scale_a = max(np.max(np.abs(base_b)), 1.0) / max(np.max(np.abs(Y)), 1.0)
    while len(starts) < config.restarts:
        starts.append((rng.normal(scale=0.1 * scale_a, size=(d, T)),
                       base_b + rng.normal(scale=0.1 * max(np.max(np.abs(base_b)), 1.0),
                                           size=d)))

    best = None
    for theta_a0, theta_b0 in starts:
        cand = _fit_single(theta_a0, theta_b0, Y, J_obs, grad_rows, c_terms,
                           feasible, config, warm_x=X_obs)
        if best is None or cand[2] < best[2]:
            best = cand
    theta_a, theta_b, _, history, iters = best

    # Report on the exact projection.
    projector = PolyhedronProjector(feasible)
    residuals = np.empty(m)
    resp_err = 0.0
    for k in range(m):
        xhat = projector.project(theta_a @ Y[k] - theta_b).solution
        residuals[k] = J_obs[k] - eval_leader_objective(Y[k], xhat, leader)
        resp_err = max(resp_err, float(np.linalg.norm(xhat - X_obs[k])))
    loss = float(np.mean(residuals ** 2))
    if len(history) >= 2 and history[-1] <= history[0] * (1 + 1e-12):
        status = "converged" if iters < config.max_iters else "max_iters"
    else:
        status = "warning"
        warnings.warn("fit did not decrease the smoothed loss", stacklevel=2)
    return FitResult(theta_a, theta_b, loss, residuals, resp_err,
                     history, iters, status)


def _fit_single(theta_a, theta_b, Y, J_obs, grad_rows, c_terms, feasible,
                config, warm_x=None):
    """One restart of the outer optimization on the smoothed loss.

    Returns (theta_a, theta_b, smoothed_loss, history, iterations).
    """
    m = Y.shape[0]
    sm = _SmoothedResponses(Y, grad_rows, feasible, config.beta_fit,
                            config.inner_grad_tol, warm_init=warm_x)
    rho = config.reg_weight

    def residuals(ta, tb, with_sens=True):
        X, S = sm.predict(ta, tb, with_sens)
        return J_obs - (np.einsum("kd,kd->k", grad_rows, X) + c_terms), S

    def loss_of(r, ta, tb):
        val = float(np.mean(r * r))
        if rho:
            val += rho * (float(np.sum(ta * ta)) + float(np.sum(tb * tb)))
        return val

    r, S = residuals(theta_a, theta_b)
    cur = loss_of(r, theta_a, theta_b)
    history = [cur]
    nu = 1e-4 * (1.0 + cur)
    bb_state = None
    iters = 0
    for iters in range(1, config.max_iters + 1):
        if cur <= config.loss_tol:
            break
        if config.step_rule == "lm":
            step = _lm_step(r, S, Y, theta_a, theta_b, nu, rho * m)
        else:
            step, bb_state = _gd_step(r, S, Y, theta_a, theta_b, rho, bb_state)
        if step is None:
            break
        d_ta, d_tb = step
        ta_try = theta_a + d_ta
        tb_try = theta_b + d_tb
        r_try, S_try = residuals(ta_try, tb_try)
        new = loss_of(r_try, ta_try, tb_try)
        if new < cur:
            rel_drop = (cur - new) / max(cur, 1e-300)
            theta_a, theta_b, r, S, cur = ta_try, tb_try, r_try, S_try, new
            nu = max(nu / 3.0, 1e-12)
            if bb_state is not None:
                bb_state = bb_state[:4] + (min(1.0, bb_state[4] * 2.0),)
            history.append(cur)
            if rel_drop < config.rel_tol:
                break
        else:
            nu *= 4.0
            if bb_state is not None:
                bb_state = bb_state[:4] + (bb_state[4] * 0.25,)
            history.append(cur)
            if nu > 1e14 * (1.0 + cur):
                break
    return theta_a, theta_b, cur, history, iters


def _lm_step(r, S, Y, theta_a, theta_b, nu, reg):
    """Damped Gauss-Newton step computed in residual space.

    Residual-Jacobian rows are built from sensitivities s_k and tariffs y_k
    as concat(vec(-s_k y_k'), s_k), so J J' = (S S') * (Y Y' + 1) entrywise.
    """
    m = r.shape[0]
    M = (S @ S.T) * (Y @ Y.T + 1.0)
    c = nu + reg
    if reg == 0.0:
        try:
            alpha = np.linalg.solve(M + c * np.eye(m), r)
        except np.linalg.LinAlgError:
            return None
        d_ta = (S.T * alpha) @ Y
        d_tb = -(S.T @ alpha)
        return d_ta, d_tb
    # Regularized step via the push-through identity on (J'J + cI)^{-1} g.
    g_ta = -(S.T * r) @ Y + reg * theta_a
    g_tb = (S.T @ r) + reg * theta_b
    Jg = -np.einsum("kd,dk->k", S, (g_ta @ Y.T) - g_tb[:, None])
    try:
        beta = np.linalg.solve(M + c * np.eye(m), Jg)
    except np.linalg.LinAlgError:
        return None
    bt_ta = (S.T * beta) @ Y * -1.0
    bt_tb = S.T @ beta
    d_ta = -(g_ta - bt_ta) / c
    d_tb = -(g_tb - bt_tb) / c
    return d_ta, d_tb


def _gd_step(r, S, Y, theta_a, theta_b, rho, bb_state):
    """Plain gradient step with Barzilai-Borwein scaling.

    bb_state carries the previous iterate/gradient and a shrink factor that
    the caller backs off on rejected steps.
    """
    m = r.shape[0]
    g_ta = -(2.0 / m) * (S.T * r) @ Y + 2.0 * rho * theta_a
    g_tb = (2.0 / m) * (S.T @ r) + 2.0 * rho * theta_b
    gnorm2 = float(np.sum(g_ta * g_ta) + np.sum(g_tb * g_tb))
    if gnorm2 <= 1e-300:
        return None, bb_state
    shrink = 1.0 if bb_state is None else bb_state[4]
    if bb_state is None:
        lr = 1.0 / (1.0 + np.sqrt(gnorm2))
    else:
        p_ta, p_tb, pg_ta, pg_tb, _ = bb_state
        ds_ta, ds_tb = theta_a - p_ta, theta_b - p_tb
        dg_ta, dg_tb = g_ta - pg_ta, g_tb - pg_tb
        num = float(np.sum(ds_ta * ds_ta) + np.sum(ds_tb * ds_tb))
        den = float(np.sum(ds_ta * dg_ta) + np.sum(ds_tb * dg_tb))
        lr = num / den if den > 1e-300 else 1e-3
        lr = float(np.clip(lr, 1e-12, 1e6))
    lr *= shrink
    new_state = (theta_a.copy(), theta_b.copy(), g_ta, g_tb, shrink)
    return (-lr * g_ta, -lr * g_tb), new_state

"""Dense convex QP machinery.

Provides Euclidean projection onto polyhedra (with KKT duals), a general
convex-QP solver used by the difference-of-convex subproblems and
feasibility checks, and the softplus-smoothed projection that makes the
follower response map differentiable.

The QP solver is an operator-splitting (ADMM) iteration with over-relaxation
on the box form ``min 1/2 x'Px + q'x  s.t.  l <= Ax <= u``, followed by an
active-set polish step that re-solves the detected active set as an equality
system.  The polish is what delivers the high-accuracy duals downstream
consumers rely on.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.special


class SolveStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


class QpError(RuntimeError):
    """Raised when a solve cannot produce a usable result."""


@dataclass(frozen=True)
class Polyhedron:
    """Constraint set {x in R^n : G x <= h}."""

    G: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        h = np.atleast_1d(np.asarray(self.h, dtype=float))
        if G.ndim != 2 or h.ndim != 1 or G.shape[0] != h.shape[0]:
            raise ValueError(
                f"inconsistent polyhedron shapes G{G.shape}, h{h.shape}")
        G.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)

    @property
    def dim(self) -> int:
        return self.G.shape[1]

    @property
    def num_rows(self) -> int:
        return self.G.shape[0]

    def contains(self, x, tol: float = 1e-9) -> bool:
        if self.num_rows == 0:
            return True
        return bool(np.max(self.G @ x - self.h) <= tol)

    def violation(self, x) -> float:
        if self.num_rows == 0:
            return 0.0
        return float(max(np.max(self.G @ x - self.h), 0.0))


def empty_polyhedron(dim: int) -> Polyhedron:
    """Unconstrained set in R^dim (zero rows)."""
    return Polyhedron(np.zeros((0, dim)), np.zeros(0))


def stack_polyhedra(parts: list[Polyhedron]) -> Polyhedron:
    """Block-diagonal stack: each part constrains its own coordinate block."""
    dims = [p.dim for p in parts]
    n = sum(dims)
    rows = sum(p.num_rows for p in parts)
    G = np.zeros((rows, n))
    h = np.zeros(rows)
    r0 = 0
    c0 = 0
    for p in parts:
        G[r0:r0 + p.num_rows, c0:c0 + p.dim] = p.G
        h[r0:r0 + p.num_rows] = p.h
        r0 += p.num_rows
        c0 += p.dim
    return Polyhedron(G, h)


@dataclass(frozen=True)
class QpProblem:
    """min 1/2 x'Px + q'x  s.t.  Gx <= h  (and optionally Ex = f)."""

    P: np.ndarray
    q_vec: np.ndarray
    constraints: Polyhedron
    eq_mat: np.ndarray | None = None
    eq_rhs: np.ndarray | None = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        q = np.asarray(self.q_vec, dtype=float)
        n = q.shape[0]
        if P.shape != (n, n):
            raise ValueError("P must be n x n matching q_vec")
        if not np.allclose(P, P.T, atol=1e-10):
            raise ValueError("P must be symmetric")
        # PSD check within 1e-8 on the smallest eigenvalue.
        if n:
            w = np.linalg.eigvalsh(0.5 * (P + P.T))
            if w[0] < -1e-8 * max(1.0, w[-1]):
                raise ValueError(f"P not positive semidefinite (min eig {w[0]:.3e})")
        if self.constraints.dim != n:
            raise ValueError("constraint dimension mismatch")
        if (self.eq_mat is None) != (self.eq_rhs is None):
            raise ValueError("eq_mat and eq_rhs must be given together")
        if self.eq_mat is not None and np.asarray(self.eq_mat).shape[1] != n:
            raise ValueError("equality dimension mismatch")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q_vec", q)


@dataclass
class SolveReport:
    solution: np.ndarray
    dual: np.ndarray               # one nonnegative multiplier per Gx <= h row
    status: SolveStatus
    primal_residual: float
    dual_residual: float
    iterations: int
    dual_eq: np.ndarray | None = None
    polished: bool = False

    @property
    def ok(self) -> bool:
        return self.status is SolveStatus.OPTIMAL


@dataclass
class QpSettings:
    eps_abs: float = 1e-9
    eps_rel: float = 1e-9
    max_iter: int = 200_000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    rho_eq_scale: float = 1e3
    adaptive_rho: bool = True
    check_interval: int = 25
    polish: bool = True
    polish_trigger: float = 1e-4
    polish_backoff: int = 4
    polish_refine_passes: int = 40
    row_scaling: bool = True
    infeas_tol: float = 1e-12


def find_feasible_point(poly: Polyhedron, margin: bool = False):
    """Phase-1 solve: a point with Gx <= h, or None if the set is empty.

    With margin=True, prefers a strictly interior point when one exists
    (slack bounded to 1 so the LP stays bounded).
    """
    q, n = poly.G.shape
    if q == 0:
        return np.zeros(n)
    c = np.zeros(n + 1)
    c[-1] = 1.0
    A_ub = np.hstack([poly.G, -np.ones((q, 1))])
    bounds = [(None, None)] * n + [(-1.0 if margin else 0.0, None)]
    res = scipy.optimize.linprog(c, A_ub=A_ub, b_ub=poly.h, bounds=bounds,
                                 method="highs")
    if res.status != 0 or res.x is None:
        return None
    t = res.x[-1]
    if t > 1e-7:
        return None
    return res.x[:n]


def _box_from_problem(problem: QpProblem):
    """Stack inequality and equality rows into l <= Ax <= u form."""
    G, h = problem.constraints.G, problem.constraints.h
    q = G.shape[0]
    blocks_A = [G]
    blocks_l = [np.full(q, -np.inf)]
    blocks_u = [h]
    if problem.eq_mat is not None:
        E = np.atleast_2d(np.asarray(problem.eq_mat, dtype=float))
        f = np.atleast_1d(np.asarray(problem.eq_rhs, dtype=float))
        blocks_A.append(E)
        blocks_l.append(f)
        blocks_u.append(f)
    A = np.vstack(blocks_A) if blocks_A else np.zeros((0, len(problem.q_vec)))
    return A, np.concatenate(blocks_l), np.concatenate(blocks_u), q


class BoxQp:
    """ADMM workhorse for min 1/2 x'Px + q'x s.t. l <= Ax <= u.

    The factorization depends only on (P, A, rho, sigma), so one instance can
    be re-solved cheaply for a sequence of linear terms q, optionally warm
    started from the previous solution.
    """

    def __init__(self, P: np.ndarray, A: np.ndarray, l: np.ndarray,
                 u: np.ndarray, settings: QpSettings | None = None):
        self.settings = settings or QpSettings()
        self.P = np.asarray(P, dtype=float)
        A = np.asarray(A, dtype=float)
        l = np.asarray(l, dtype=float)
        u = np.asarray(u, dtype=float)
        self.m, self.n = A.shape
        # Row equilibration: scaling rows of (A, l, u) leaves the feasible set
        # unchanged but conditions the splitting; duals are unscaled on exit.
        if self.settings.row_scaling and self.m:
            norms = np.linalg.norm(A, axis=1)
            self._row_scale = 1.0 / np.maximum(norms, 1e-10)
        else:
            self._row_scale = np.ones(self.m)
        self.A = A * self._row_scale[:, None]
        with np.errstate(invalid="ignore"):
            self.l = l * self._row_scale
            self.u = u * self._row_scale
        self.is_eq = np.isfinite(self.l) & np.isfinite(self.u) & (self.l == self.u)
        self._is_identity_P = (
            self.P.shape == (self.n, self.n)
            and np.array_equal(self.P, np.eye(self.n)))
        self._rho_base = self.settings.rho
        self._factorize()
        self._warm = None
        self._last_active = None
        # Simple-bound rows (single nonzero entry) polish much faster via
        # variable elimination.
        nz_counts = np.count_nonzero(self.A, axis=1)
        self._simple_rows = nz_counts == 1
        self._simple_col = np.argmax(np.abs(self.A), axis=1) if self.m else np.zeros(0, int)

    # -- factorization ----------------------------------------------------
    def _rho_vec(self):
        rho = np.full(self.m, self._rho_base)
        rho[self.is_eq] *= self.settings.rho_eq_scale
        return rho

    def _factorize(self):
        self.rho = self._rho_vec()
        M = self.P + self.settings.sigma * np.eye(self.n)
        if self.m:
            M = M + (self.A.T * self.rho) @ self.A
        self._chol = scipy.linalg.cho_factor(M, lower=True, check_finite=False)

    # -- main solve --------------------------------------------------------
    def solve(self, q: np.ndarray, warm_start: bool = True) -> SolveReport:
        s = self.settings
        q = np.asarray(q, dtype=float)
        if self.m == 0:
            x, *_ = np.linalg.lstsq(self.P, -q, rcond=None)
            r_dual = float(np.max(np.abs(self.P @ x + q), initial=0.0))
            return SolveReport(x, np.zeros(0), SolveStatus.OPTIMAL,
                               0.0, r_dual, 0)
        if warm_start and self._warm is not None:
            x, z, y = (v.copy() for v in self._warm)
        else:
            x = np.zeros(self.n)
            z = np.clip(self.A @ x, self.l, self.u)
            y = np.zeros(self.m)

        # Predict-polish: for a sequence of nearby solves the previous active
        # set is usually still optimal, making the whole solve one KKT system.
        if warm_start and s.polish and self._last_active is not None:
            pol = self._polish(q, x, z, y, guess=self._last_active)
            if pol is not None:
                x_p, y_p, rp, rd = pol
                scale = 1.0 + np.max(np.abs(q), initial=0.0)
                if rp <= 1e-9 * scale and rd <= 1e-8 * scale:
                    return SolveReport(x_p, self._ineq_dual(y_p),
                                       SolveStatus.OPTIMAL, rp, rd, 0,
                                       dual_eq=self._eq_dual(y_p), polished=True)

        alpha = s.alpha
        best = None
        next_polish_check = 1
        check_no = 0
        k = 0
        for k in range(1, s.max_iter + 1):
            rhs = s.sigma * x - q + self.A.T @ (self.rho * z - y)
            x_til = scipy.linalg.cho_solve(self._chol, rhs, check_finite=False)
            z_til = self.A @ x_til
            x_new = alpha * x_til + (1 - alpha) * x
            v = alpha * z_til + (1 - alpha) * z + y / self.rho
            z_new = np.clip(v, self.l, self.u)
            y_new = y + self.rho * (alpha * z_til + (1 - alpha) * z - z_new)

            if k % s.check_interval == 0 or k == s.max_iter:
                check_no += 1
                Ax = self.A @ x_new
                r_prim = float(np.max(np.abs(Ax - z_new), initial=0.0))
                Px = self.P @ x_new
                Aty = self.A.T @ y_new
                r_dual = float(np.max(np.abs(Px + q + Aty), initial=0.0))
                eps_prim = s.eps_abs + s.eps_rel * max(
                    np.max(np.abs(Ax), initial=0.0), np.max(np.abs(z_new), initial=0.0))
                eps_dual = s.eps_abs + s.eps_rel * max(
                    np.max(np.abs(Px), initial=0.0), np.max(np.abs(q), initial=0.0),
                    np.max(np.abs(Aty), initial=0.0))

                if r_prim <= eps_prim and r_dual <= eps_dual:
                    self._warm = (x_new, z_new, y_new)
                    return self._finish(q, x_new, z_new, y_new, k, r_prim, r_dual)

                # Early polish: once the active-set guess stabilizes, the
                # equality re-solve lands on the exact solution long before
                # the splitting iterations reach tolerance.
                trig_p = s.polish_trigger * (1.0 + np.max(np.abs(z_new), initial=0.0))
                trig_d = s.polish_trigger * (1.0 + np.max(np.abs(q), initial=0.0))
                if (s.polish and check_no >= next_polish_check
                        and (check_no == 1 or (r_prim <= trig_p and r_dual <= trig_d))):
                    pol = self._polish(q, x_new, z_new, y_new)
                    if pol is not None:
                        self._warm = (x_new, z_new, y_new)
                        x_p, y_p, rp, rd = pol
                        return SolveReport(x_p, self._ineq_dual(y_p),
                                           SolveStatus.OPTIMAL, rp, rd, k,
                                           dual_eq=self._eq_dual(y_p),
                                           polished=True)
                    next_polish_check = check_no + s.polish_backoff

                if self._primal_infeasible(y_new - y):
                    return SolveReport(x_new, self._ineq_dual(y_new),
                                       SolveStatus.INFEASIBLE, r_prim, r_dual, k)

                if best is None or r_prim + r_dual < best[0]:
                    best = (r_prim + r_dual, x_new.copy(), z_new.copy(),
                            y_new.copy(), r_prim, r_dual)

                if s.adaptive_rho and k % (40 * s.check_interval) == 0:
                    self._maybe_rescale(r_prim, r_dual, Ax, z_new, Px, q, Aty)

            x, z, y = x_new, z_new, y_new

        if best is None:
            best = (np.inf, x, z, y, np.inf, np.inf)
        _, xb, zb, yb, rp, rd = best
        self._warm = (xb, zb, yb)
        pol = self._polish(q, xb, zb, yb) if s.polish else None
        if pol is not None:
            x_p, y_p, rp2, rd2 = pol
            return SolveReport(x_p, self._ineq_dual(y_p), SolveStatus.OPTIMAL,
                               rp2, rd2, k, dual_eq=self._eq_dual(y_p),
                               polished=True)
        return SolveReport(xb, self._ineq_dual(yb), SolveStatus.MAX_ITER,
                           rp, rd, k, dual_eq=self._eq_dual(yb))

    def _finish(self, q, x, z, y, k, r_prim, r_dual):
        if self.settings.polish:
            pol = self._polish(q, x, z, y)
            if pol is not None:
                x_p, y_p, rp, rd = pol
                if rp <= r_prim + 1e-12 and rd <= r_dual + 1e-12:
                    return SolveReport(x_p, self._ineq_dual(y_p),
                                       SolveStatus.OPTIMAL, rp, rd, k,
                                       dual_eq=self._eq_dual(y_p),
                                       polished=True)
        return SolveReport(x, self._ineq_dual(y), SolveStatus.OPTIMAL,
                           r_prim, r_dual, k, dual_eq=self._eq_dual(y))

    def _ineq_dual(self, y):
        dual = y * self._row_scale
        dual[self.is_eq] = 0.0
        return np.maximum(dual, 0.0)

    def _eq_dual(self, y):
        return (y * self._row_scale)[self.is_eq].copy()

    def _maybe_rescale(self, r_prim, r_dual, Ax, z, Px, q, Aty):
        sp = max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(z), initial=0.0), 1e-12)
        sd = max(np.max(np.abs(Px), initial=0.0), np.max(np.abs(q), initial=0.0),
                 np.max(np.abs(Aty), initial=0.0), 1e-12)
        ratio = np.sqrt((r_prim / sp) / max(r_dual / sd, 1e-16))
        if ratio > 5.0 or ratio < 0.2:
            self._rho_base = float(np.clip(self._rho_base * ratio, 1e-6, 1e6))
            self._factorize()

    def _primal_infeasible(self, dy):
        nd = np.max(np.abs(dy), initial=0.0)
        if nd < 1e-14:
            return False
        dyn = dy / nd
        if np.max(np.abs(self.A.T @ dyn), initial=0.0) > 1e-10:
            return False
        pos, neg = np.maximum(dyn, 0.0), np.minimum(dyn, 0.0)
        if np.any(pos[~np.isfinite(self.u)] > 1e-12):
            return False
        if np.any(-neg[~np.isfinite(self.l)] > 1e-12):
            return False
        support = float(np.sum(self.u[np.isfinite(self.u)] * pos[np.isfinite(self.u)])
                        + np.sum(self.l[np.isfinite(self.l)] * neg[np.isfinite(self.l)]))
        return support < -1e-10

    # -- active-set polish --------------------------------------------------
    def _polish(self, q, x, z, y, guess=None):
        """Re-solve the detected active set as equalities; validate KKT.

        Returns (x, y_full, r_prim, r_dual) or None if no valid polish found.
        Refinement adds every violated row and drops every wrong-signed dual
        per pass, so a stale guess converges in a handful of passes.
        """
        s = self.settings
        m = self.m
        scale = 1.0 + np.max(np.abs(q), initial=0.0)
        if guess is not None:
            active, on_upper = guess[0].copy(), guess[1].copy()
            active |= self.is_eq
            on_upper |= self.is_eq
        else:
            act_tol = 1e-7 * (1.0 + np.max(np.abs(z), initial=0.0))
            lower = (~self.is_eq) & np.isfinite(self.l) & (
                (y < -1e-9) | (z - self.l <= act_tol))
            upper = (~self.is_eq) & np.isfinite(self.u) & (
                (y > 1e-9) | (self.u - z <= act_tol))
            active = self.is_eq | lower | upper
            on_upper = self.is_eq | upper

        best = None
        for _ in range(s.polish_refine_passes):
            b_act = np.where(on_upper, self.u, self.l)
            sol = self._kkt_solve(q, active, b_act)
            if sol is None:
                return best
            x_p, nu = sol
            y_full = np.zeros(m)
            y_full[active] = nu
            Ax = self.A @ x_p
            viol_u = np.where(np.isfinite(self.u), Ax - self.u, -np.inf)
            viol_l = np.where(np.isfinite(self.l), self.l - Ax, -np.inf)
            viol = np.maximum(np.maximum(viol_u, viol_l), 0.0)
            viol[active] = 0.0
            ineq_act = active & ~self.is_eq
            bad_sign = np.zeros(m)
            up = ineq_act & on_upper
            low = ineq_act & ~on_upper
            bad_sign[up] = np.maximum(-y_full[up], 0.0)
            bad_sign[low] = np.maximum(y_full[low], 0.0)

            r_prim = float(np.max(viol, initial=0.0))
            r_dual = float(np.max(np.abs(self.P @ x_p + q + self.A.T @ y_full),
                                  initial=0.0))
            feas_ok = r_prim <= 1e-9 * scale
            sign_ok = np.max(bad_sign, initial=0.0) <= 1e-7 * scale
            if feas_ok and sign_ok and r_dual <= 1e-8 * scale:
                yc = y_full.copy()
                yc[low] = np.minimum(yc[low], 0.0)
                yc[up] = np.maximum(yc[up], 0.0)
                self._last_active = (active.copy(), on_upper.copy())
                return x_p, yc, r_prim, float(np.max(np.abs(
                    self.P @ x_p + q + self.A.T @ yc), initial=0.0))
            if feas_ok and sign_ok:
                best = (x_p, y_full, r_prim, r_dual)
            add = viol > 1e-9 * scale
            drop = bad_sign > 1e-7 * scale
            if not add.any() and not drop.any():
                return best
            if add.any():
                active[add] = True
                on_upper[add] = viol_u[add] >= viol_l[add]
            if drop.any():
                active[drop] = False
                on_upper[drop] = False
        return best

    def _kkt_solve(self, q, active, b_act):
        """Equality-constrained solve on the active set.

        Rows that fix a single variable are eliminated first, which keeps the
        KKT system small when many bound rows are active.
        """
        act_idx = np.where(active)[0]
        simple = act_idx[self._simple_rows[act_idx]]
        general = act_idx[~self._simple_rows[act_idx]]

        fixed_val = np.full(self.n, np.nan)
        fix_row_of_col: dict[int, int] = {}
        for r in simple:
            c = int(self._simple_col[r])
            v = b_act[r] / self.A[r, c]
            if c in fix_row_of_col:
                prev = fixed_val[c]
                if abs(prev - v) > 1e-9 * (1.0 + abs(prev)):
                    return None  # contradictory bounds in the active guess
                continue
            fix_row_of_col[c] = int(r)
            fixed_val[c] = v
        fixed_mask = ~np.isnan(fixed_val)
        free_mask = ~fixed_mask
        nf = int(free_mask.sum())

        A_g = self.A[general][:, free_mask] if general.size else np.zeros((0, nf))
        b_g = b_act[general] - (self.A[general][:, fixed_mask] @ fixed_val[fixed_mask]
                                if general.size and fixed_mask.any() else 0.0)
        P_ff = self.P[np.ix_(free_mask, free_mask)]
        q_f = q[free_mask] + (self.P[np.ix_(free_mask, fixed_mask)] @ fixed_val[fixed_mask]
                              if fixed_mask.any() else 0.0)

        ng = A_g.shape[0]
        if self._is_identity_P:
            # Projection fast path: P_ff is the identity, so the KKT system
            # reduces to a Schur complement on the general active rows.
            if ng == 0:
                x_f = -q_f
                nu_g = np.zeros(0)
            else:
                Sm = A_g @ A_g.T
                rhs = A_g @ (-q_f) - b_g
                nu_g = self._reg_solve(Sm, rhs)
                if nu_g is None:
                    return None
                x_f = -q_f - A_g.T @ nu_g
        else:
            K = np.zeros((nf + ng, nf + ng))
            K[:nf, :nf] = P_ff
            if ng:
                K[:nf, nf:] = A_g.T
                K[nf:, :nf] = A_g
            rhs = np.concatenate([-q_f, b_g])
            sol = self._reg_solve(K, rhs)
            if sol is None:
                return None
            x_f = sol[:nf]
            nu_g = sol[nf:]
        x = np.empty(self.n)
        x[free_mask] = x_f
        x[fixed_mask] = fixed_val[fixed_mask]
        # Duals of the eliminated simple rows from stationarity.
        resid = self.P @ x + q
        if ng:
            resid = resid + self.A[general].T @ nu_g
        nu = np.zeros(len(act_idx))
        pos_of = {int(r): i for i, r in enumerate(act_idx)}
        for c, r in fix_row_of_col.items():
            nu[pos_of[r]] = -resid[c] / self.A[r, c]
        for i, r in enumerate(general):
            nu[pos_of[int(r)]] = nu_g[i]
        return x, nu

    @staticmethod
    def _reg_solve(K, rhs):
        n = K.shape[0]
        if n == 0:
            return np.zeros(0)
        reg = 1e-11 * (1.0 + np.max(np.abs(K)))
        Kr = K + reg * np.eye(n)
        try:
            sol = np.linalg.solve(Kr, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
            return sol
        # One step of iterative refinement against the unregularized system.
        r = rhs - K @ sol
        try:
            sol = sol + np.linalg.solve(Kr, r)
        except np.linalg.LinAlgError:
            pass
        if not np.all(np.isfinite(sol)):
            return None
        return sol


def solve_qp(problem: QpProblem, settings: QpSettings | None = None,
             warm_start: bool = False) -> SolveReport:
    """Solve a convex QP; report includes per-inequality-row duals."""
    A, l, u, q_ineq = _box_from_problem(problem)
    box = BoxQp(problem.P, A, l, u, settings)
    rep = box.solve(problem.q_vec, warm_start=warm_start)
    rep.dual = rep.dual[:q_ineq]
    return rep


def project(point: np.ndarray, poly: Polyhedron,
            settings: QpSettings | None = None) -> SolveReport:
    """Euclidean projection of point onto {Gz <= h}, with KKT duals.

    At optimality the report satisfies z - point + G' theta = 0, theta >= 0
    and complementary slackness within solver tolerance.
    """
    return PolyhedronProjector(poly, settings).project(point)


class PolyhedronProjector:
    """Projection onto a fixed polyhedron, factored once and warm started.

    Repeated projections onto the same set (the follower oracle's main load)
    reuse the ADMM factorization and the previous solution.
    """

    def __init__(self, poly: Polyhedron, settings: QpSettings | None = None):
        self.poly = poly
        n = poly.dim
        self._box = BoxQp(np.eye(n), poly.G, np.full(poly.num_rows, -np.inf),
                          poly.h, settings)

    def project(self, point: np.ndarray, warm_start: bool = True) -> SolveReport:
        point = np.asarray(point, dtype=float)
        if self.poly.num_rows == 0:
            return SolveReport(point.copy(), np.zeros(0), SolveStatus.OPTIMAL,
                               0.0, 0.0, 0)
        if self.poly.contains(point, tol=1e-12):
            return SolveReport(point.copy(), np.zeros(self.poly.num_rows),
                               SolveStatus.OPTIMAL, 0.0, 0.0, 0)
        return self._box.solve(-point, warm_start=warm_start)


# -- smoothed projection ----------------------------------------------------

def _softplus_terms(t: np.ndarray, beta: float):
    """Stable s = log(1+exp(t/beta)), sigmoid(t/beta) pair."""
    r = t / beta
    s = np.where(r > 30.0, r, np.log1p(np.exp(np.minimum(r, 30.0))))
    sig = scipy.special.expit(r)
    return s, sig


def smoothed_project(point: np.ndarray, poly: Polyhedron, beta: float,
                     grad_tol: float = 1e-9, max_iter: int = 200,
                     x0: np.ndarray | None = None) -> np.ndarray:
    """Minimizer of 1/2||z - point||^2 + beta * sum softplus((Gz-h)_i)^2.

    The squared-softplus penalty replaces the hard projection constraints;
    the problem is strongly convex, solved by a damped Newton iteration with
    backtracking line search.
    """
    x, _ = smoothed_project_full(point, poly, beta, grad_tol, max_iter, x0)
    return x


def smoothed_project_full(point: np.ndarray, poly: Polyhedron, beta: float,
                          grad_tol: float = 1e-9, max_iter: int = 200,
                          x0: np.ndarray | None = None):
    """smoothed_project plus the final Hessian factorization.

    Returns (z, info) where info.solve applies (I + G'DG)^{-1}, the
    sensitivity of the smoothed map at the solution (implicit function
    theorem on the optimality condition).
    """
    return SmoothedProjector(poly, beta).project_full(
        point, grad_tol=grad_tol, max_iter=max_iter, x0=x0)


class SmoothedProjector:
    """Softplus-smoothed projection onto a fixed polyhedron.

    Precomputes the row Gram matrix so each damped-Newton iteration solves a
    system only over the currently relevant rows (Woodbury identity), which
    is what makes repeated smoothed projections affordable.
    """

    def __init__(self, poly: Polyhedron, beta: float):
        if beta <= 0:
            raise ValueError("beta must be positive")
        self.poly = poly
        self.beta = beta
        G = poly.G
        q, n = G.shape
        self.q, self.n = q, n
        if q:
            self.gram = G @ G.T
        else:
            self.gram = np.zeros((0, 0))

    def project(self, point, grad_tol: float = 1e-9, max_iter: int = 200,
                x0=None) -> np.ndarray:
        return self.project_full(point, grad_tol, max_iter, x0)[0]

    def project_full(self, point, grad_tol: float = 1e-9,
                     max_iter: int = 200, x0=None):
        a = np.asarray(point, dtype=float)
        G, h = self.poly.G, self.poly.h
        beta = self.beta
        n = self.n
        if self.q == 0:
            return a.copy(), _SmoothInfo(None, None, None, 0)

        z = a.copy() if x0 is None else np.asarray(x0, dtype=float).copy()

        def f_and_parts(zv):
            t = G @ zv - h
            s, sig = _softplus_terms(t, beta)
            fval = 0.5 * float(np.dot(zv - a, zv - a)) + beta * float(np.dot(s, s))
            return fval, s, sig

        fval, s, sig = f_and_parts(z)
        best = None
        since_best = 0
        for it in range(1, max_iter + 1):
            w = 2.0 * s * sig
            g = z - a + G.T @ w
            gnorm = float(np.linalg.norm(g))
            # Hessian weights: (2/beta) * (sig^2 + s*sig*(1-sig)).
            d = (2.0 / beta) * (sig * sig + s * sig * (1.0 - sig))
            dmax = np.max(d, initial=0.0)
            idx = np.where(d > 1e-13 * (1.0 + dmax))[0]
            solver = self._factor(idx, d)
            tol_eff = max(grad_tol,
                          1e-12 * (1.0 + float(np.max(np.abs(z - a), initial=0.0))
                                   + float(np.max(np.abs(w), initial=0.0))))
            if gnorm <= tol_eff:
                return z, _SmoothInfo(*solver, it)
            if best is None or gnorm < best[0]:
                best = (gnorm, z.copy(), solver, it)
                since_best = 0
            else:
                since_best += 1
                if since_best >= 10:
                    # Gradient at the evaluation-noise floor; the best
                    # iterate is the solution at working precision.
                    return best[1], _SmoothInfo(*best[2], it)
            dz = -self._apply_inv(solver, g)
            step = 1.0
            descent = float(np.dot(g, dz))
            f_slack = 16.0 * np.finfo(float).eps * abs(fval)
            ok = False
            for _ in range(60):
                z_new = z + step * dz
                f_new, s_new, sig_new = f_and_parts(z_new)
                if f_new <= fval + 1e-4 * step * descent + f_slack:
                    ok = True
                    break
                step *= 0.5
            if not ok:
                return z, _SmoothInfo(*solver, it)  # stalled at optimum scale
            z, fval, s, sig = z_new, f_new, s_new, sig_new
        raise QpError(f"smoothed projection did not reach gradient norm "
                      f"{grad_tol:g} in {max_iter} iterations")

    def _factor(self, idx, d):
        """Factor (I + G_k' D_k G_k) via the k x k Woodbury system."""
        k = idx.size
        if k == 0:
            return None, None, None
        if k <= 0.9 * self.n:
            S = self.gram[np.ix_(idx, idx)].copy()
            S[np.diag_indices(k)] += 1.0 / d[idx]
            chol = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
            return chol, self.poly.G[idx], None
        Gk = self.poly.G[idx]
        H = np.eye(self.n) + (Gk.T * d[idx]) @ Gk
        chol = scipy.linalg.cho_factor(H, lower=True, check_finite=False)
        return chol, None, True

    @staticmethod
    def _apply_inv(solver, rhs):
        chol, Gk, direct = solver
        if chol is None:
            return rhs.copy()
        if direct:
            return scipy.linalg.cho_solve(chol, rhs, check_finite=False)
        alpha = scipy.linalg.cho_solve(chol, Gk @ rhs, check_finite=False)
        return rhs - Gk.T @ alpha


@dataclass
class _SmoothInfo:
    chol: tuple | None
    Gk: np.ndarray | None
    direct: bool | None
    iterations: int

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Apply (I + G'DG)^{-1}, the sensitivity of the smoothed map."""
        return SmoothedProjector._apply_inv((self.chol, self.Gk, self.direct),
                                            rhs)

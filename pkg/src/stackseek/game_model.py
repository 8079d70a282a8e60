"""Follower game data, leader objective, and the aggregate response model.

The community of prosumers plays a Nash game with a shared capacity
constraint; for any tariff the unique variational equilibrium is the
projection of an affine function of the tariff onto the stacked feasible
polyhedron.  This module holds the per-prosumer data and performs the exact
mapping from prosumer parameters to that affine-plus-projection response
model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .qp_engine import Polyhedron, find_feasible_point


class GameConstructionError(ValueError):
    """Raised when game data is inconsistent or a feasible set is empty."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ProsumerParams:
    """One prosumer: desired profile, price sensitivity, offtake map, local set.

    `price_sensitivity` may be a scalar pi >= 0 (expanded to pi * I) or a full
    T x T weighting matrix.
    """

    desired_profile: np.ndarray         # length m_i * T
    offtake_map: np.ndarray             # T x (m_i * T)
    local_constraints: Polyhedron       # over R^{m_i * T}
    price_sensitivity: float | np.ndarray = 1.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.offtake_map, dtype=float))
        r = np.atleast_1d(np.asarray(self.desired_profile, dtype=float))
        T, n = A.shape
        if n == 0 or T == 0:
            raise GameConstructionError("offtake map must be nonempty")
        if n % T != 0:
            raise GameConstructionError(
                f"offtake map has {n} columns, not a multiple of horizon {T}")
        if r.shape != (n,):
            raise GameConstructionError(
                f"desired profile length {r.shape[0]} != decision dim {n}")
        if self.local_constraints.dim != n:
            raise GameConstructionError(
                f"local constraints over R^{self.local_constraints.dim}, "
                f"decisions in R^{n}")
        pi = self.price_sensitivity
        if np.isscalar(pi):
            if pi < 0:
                raise GameConstructionError("scalar price sensitivity must be >= 0")
            Pi = float(pi) * np.eye(T)
        else:
            Pi = np.asarray(pi, dtype=float)
            if Pi.shape != (T, T):
                raise GameConstructionError(
                    f"sensitivity matrix must be {T}x{T}, got {Pi.shape}")
            if np.count_nonzero(Pi - np.diag(np.diagonal(Pi))) == 0 and \
                    np.any(np.diagonal(Pi) < 0):
                raise GameConstructionError(
                    "diagonal sensitivity matrix must be nonnegative")
        object.__setattr__(self, "desired_profile", _freeze(r))
        object.__setattr__(self, "offtake_map", _freeze(A))
        object.__setattr__(self, "price_sensitivity", _freeze(Pi))

    @property
    def horizon(self) -> int:
        return self.offtake_map.shape[0]

    @property
    def dim(self) -> int:
        return self.offtake_map.shape[1]


@dataclass(frozen=True)
class FollowerGame:
    """N prosumers, a retail price, and the shared capacity bound."""

    prosumers: tuple[ProsumerParams, ...]
    retail_price: np.ndarray            # length T
    coupling_bound: np.ndarray          # length T
    check_feasibility: bool = True

    def __post_init__(self):
        prosumers = tuple(self.prosumers)
        if not prosumers:
            raise GameConstructionError("at least one prosumer required")
        T = prosumers[0].horizon
        for i, pr in enumerate(prosumers):
            if pr.horizon != T:
                raise GameConstructionError(
                    f"prosumer {i} horizon {pr.horizon} != {T}")
        p = np.atleast_1d(np.asarray(self.retail_price, dtype=float))
        b = np.atleast_1d(np.asarray(self.coupling_bound, dtype=float))
        if p.shape != (T,):
            raise GameConstructionError(f"retail price must have length {T}")
        if b.shape != (T,):
            raise GameConstructionError(
                f"coupling bound must have exactly {T} rows")
        object.__setattr__(self, "prosumers", prosumers)
        object.__setattr__(self, "retail_price", _freeze(p))
        object.__setattr__(self, "coupling_bound", _freeze(b))
        if self.check_feasibility:
            self._check_nonempty()

    def _check_nonempty(self):
        for i, pr in enumerate(self.prosumers):
            if find_feasible_point(pr.local_constraints) is None:
                raise GameConstructionError(
                    f"local constraint set of prosumer {i} is empty")
        if find_feasible_point(self.stacked_constraints()) is None:
            raise GameConstructionError(
                "joint feasible set is empty: local sets are individually "
                "feasible but the coupling capacity rows cut them off")

    @property
    def horizon(self) -> int:
        return self.prosumers[0].horizon

    @property
    def num_prosumers(self) -> int:
        return len(self.prosumers)

    @property
    def dim(self) -> int:
        return sum(pr.dim for pr in self.prosumers)

    def aggregate_map(self) -> np.ndarray:
        """A = [A_1 ... A_N], mapping stacked decisions to hourly offtake."""
        return np.hstack([pr.offtake_map for pr in self.prosumers])

    def stacked_constraints(self) -> Polyhedron:
        """Local blocks in prosumer order, coupling rows appended last.

        The row ordering is fixed so dual variables are reproducibly indexed.
        """
        d = self.dim
        rows = sum(pr.local_constraints.num_rows for pr in self.prosumers)
        T = self.horizon
        G = np.zeros((rows + T, d))
        h = np.zeros(rows + T)
        r0 = 0
        c0 = 0
        for pr in self.prosumers:
            lc = pr.local_constraints
            G[r0:r0 + lc.num_rows, c0:c0 + pr.dim] = lc.G
            h[r0:r0 + lc.num_rows] = lc.h
            r0 += lc.num_rows
            c0 += pr.dim
        G[rows:, :] = self.aggregate_map()
        h[rows:] = self.coupling_bound
        return Polyhedron(G, h)

    def block_slices(self) -> list[slice]:
        out = []
        c0 = 0
        for pr in self.prosumers:
            out.append(slice(c0, c0 + pr.dim))
            c0 += pr.dim
        return out


@dataclass(frozen=True)
class ResponseModel:
    """Parameters (theta_a, theta_b, C) of the follower response map.

    The community's reaction to a tariff y is proj_C(theta_a @ y - theta_b).
    """

    theta_a: np.ndarray                 # d x T
    theta_b: np.ndarray                 # length d
    feasible_set: Polyhedron

    def __post_init__(self):
        ta = np.atleast_2d(np.asarray(self.theta_a, dtype=float))
        tb = np.atleast_1d(np.asarray(self.theta_b, dtype=float))
        if ta.shape[0] != tb.shape[0] or ta.shape[0] != self.feasible_set.dim:
            raise GameConstructionError(
                f"inconsistent response model dims: theta_a {ta.shape}, "
                f"theta_b {tb.shape}, set over R^{self.feasible_set.dim}")
        object.__setattr__(self, "theta_a", _freeze(ta))
        object.__setattr__(self, "theta_b", _freeze(tb))

    @property
    def dim(self) -> int:
        return self.theta_a.shape[0]

    @property
    def horizon(self) -> int:
        return self.theta_a.shape[1]

    def pre_projection(self, y: np.ndarray) -> np.ndarray:
        """The unconstrained response theta_a @ y - theta_b."""
        return self.theta_a @ y - self.theta_b


def build_response_model(game: FollowerGame) -> ResponseModel:
    """Exact block mapping from prosumer data to the response model.

    Block i of theta_a is -1/2 A_i' Pi_i' and block i of theta_b is
    1/2 A_i' Pi_i' p - r_i, i.e. the stacked unconstrained minimizers of the
    prosumer costs are theta_a @ y - theta_b.
    """
    T = game.horizon
    d = game.dim
    theta_a = np.zeros((d, T))
    theta_b = np.zeros(d)
    p = game.retail_price
    c0 = 0
    for pr in game.prosumers:
        APt = pr.offtake_map.T @ pr.price_sensitivity.T
        theta_a[c0:c0 + pr.dim, :] = -0.5 * APt
        theta_b[c0:c0 + pr.dim] = 0.5 * (APt @ p) - pr.desired_profile
        c0 += pr.dim
    return ResponseModel(theta_a, theta_b, game.stacked_constraints())


@dataclass(frozen=True)
class LeaderParams:
    """Tariff-designer objective data.

    J0(y, x) = -y' Lambda A x + mu (1'y - target)^2 + ridge ||y||^2.
    """

    lambda_mat: np.ndarray              # T x T
    mu: float
    ridge: float
    target_sum: float
    aggregate_map: np.ndarray           # T x d

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.lambda_mat, dtype=float))
        A = np.atleast_2d(np.asarray(self.aggregate_map, dtype=float))
        T = L.shape[0]
        if L.shape != (T, T):
            raise GameConstructionError("lambda_mat must be square")
        if A.shape[0] != T:
            raise GameConstructionError(
                f"aggregate map has {A.shape[0]} rows, expected {T}")
        if self.mu < 0:
            raise GameConstructionError("mu must be nonnegative")
        if self.ridge <= 0:
            raise GameConstructionError("ridge must be positive for coercivity")
        object.__setattr__(self, "lambda_mat", _freeze(L))
        object.__setattr__(self, "aggregate_map", _freeze(A))

    @property
    def horizon(self) -> int:
        return self.lambda_mat.shape[0]

    @property
    def dim(self) -> int:
        return self.aggregate_map.shape[1]

    def grad_in_x(self, y: np.ndarray) -> np.ndarray:
        """Gradient of the objective in the response variable: -A' Lambda' y."""
        return -(self.aggregate_map.T @ (self.lambda_mat.T @ y))

    @staticmethod
    def for_game(game: FollowerGame, lambda_mat=None, mu: float = 1000.0,
                 ridge: float = 50.0, target_sum: float = 0.0) -> "LeaderParams":
        T = game.horizon
        L = np.eye(T) if lambda_mat is None else lambda_mat
        return LeaderParams(L, mu, ridge, target_sum, game.aggregate_map())


def eval_leader_objective(y: np.ndarray, x: np.ndarray,
                          params: LeaderParams) -> float:
    """-y' Lambda A x + mu (1'y - target)^2 + ridge ||y||^2."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if y.shape != (params.horizon,):
        raise ValueError(f"tariff length {y.shape} != horizon {params.horizon}")
    if x.shape != (params.dim,):
        raise ValueError(f"response length {x.shape} != dim {params.dim}")
    rev = -float(y @ (params.lambda_mat @ (params.aggregate_map @ x)))
    dev = float(np.sum(y)) - params.target_sum
    return rev + params.mu * dev * dev + params.ridge * float(y @ y)


def eval_follower_cost(i: int, x_i: np.ndarray, y: np.ndarray,
                       game: FollowerGame) -> float:
    """||x_i - r_i||^2 + (p + y)' Pi_i A_i x_i for prosumer i."""
    if not 0 <= i < game.num_prosumers:
        raise IndexError(f"prosumer index {i} out of range")
    pr = game.prosumers[i]
    x_i = np.asarray(x_i, dtype=float)
    y = np.asarray(y, dtype=float)
    if x_i.shape != (pr.dim,):
        raise ValueError("decision vector has wrong length")
    if y.shape != (game.horizon,):
        raise ValueError("tariff has wrong length")
    diff = x_i - pr.desired_profile
    price = (game.retail_price + y) @ (pr.price_sensitivity @ (pr.offtake_map @ x_i))
    return float(diff @ diff) + float(price)


def follower_pseudogradient(x: np.ndarray, y: np.ndarray,
                            game: FollowerGame) -> np.ndarray:
    """Stacked per-prosumer cost gradients col(2(x_i - r_i) + A_i' Pi_i' (p+y))."""
    F = np.empty(game.dim)
    py = game.retail_price + y
    for sl, pr in zip(game.block_slices(), game.prosumers):
        F[sl] = 2.0 * (x[sl] - pr.desired_profile) + \
            pr.offtake_map.T @ (pr.price_sensitivity.T @ py)
    return F

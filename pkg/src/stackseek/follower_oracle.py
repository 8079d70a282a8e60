"""Query interface to the simulated energy community.

The oracle is the only component that holds the community's true response
parameters; tariff-seeking code interacts with it through `query`, which
returns the unique equilibrium response, counts the interaction, and logs it
to the dataset.  `verify_vgne` independently checks that a response satisfies
the equilibrium variational inequality via its KKT conditions.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .game_model import (FollowerGame, LeaderParams, ResponseModel,
                         eval_leader_objective, follower_pseudogradient)
from .qp_engine import Polyhedron, PolyhedronProjector, QpSettings, SolveStatus


class OracleError(RuntimeError):
    pass


class QueryTag(enum.Enum):
    NOMINAL = "nominal"
    PERTURBED = "perturbed"
    VALIDATION = "validation"


@dataclass(frozen=True)
class InteractionRecord:
    query_index: int
    tag: QueryTag
    y: np.ndarray
    x: np.ndarray
    J0: float


class InteractionDataset:
    """Append-only log of (tariff, response) pairs with query accounting."""

    def __init__(self):
        self._records: list[InteractionRecord] = []

    def append(self, record: InteractionRecord):
        self._records.append(record)

    @property
    def records(self) -> list[InteractionRecord]:
        return self._records

    @property
    def query_count(self) -> int:
        return len(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def snapshot(self) -> list[InteractionRecord]:
        """Shallow copy safe for concurrent read-only analysis."""
        return list(self._records)

    def tariffs(self) -> np.ndarray:
        return np.array([r.y for r in self._records])

    def responses(self) -> np.ndarray:
        return np.array([r.x for r in self._records])

    # -- serialization ------------------------------------------------------
    def to_csv(self, path):
        if not self._records:
            raise ValueError("cannot infer dimensions of an empty dataset")
        T = len(self._records[0].y)
        d = len(self._records[0].x)
        header = (["query_index", "tag"]
                  + [f"y_{t + 1}" for t in range(T)]
                  + [f"x_{j + 1}" for j in range(d)] + ["J0"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in self._records:
                w.writerow([r.query_index, r.tag.value]
                           + [f"{v:.17g}" for v in r.y]
                           + [f"{v:.17g}" for v in r.x]
                           + [f"{r.J0:.17g}"])

    @classmethod
    def from_csv(cls, path) -> "InteractionDataset":
        ds = cls()
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            T = sum(1 for c in header if c.startswith("y_"))
            for row in rd:
                y = np.array([float(v) for v in row[2:2 + T]])
                x = np.array([float(v) for v in row[2 + T:-1]])
                ds.append(InteractionRecord(int(row[0]), QueryTag(row[1]),
                                            y, x, float(row[-1])))
        return ds

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self._records:
                fh.write(json.dumps({
                    "query_index": r.query_index, "tag": r.tag.value,
                    "y": list(r.y), "x": list(r.x), "J0": r.J0}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "InteractionDataset":
        ds = cls()
        with open(path) as fh:
            for line in fh:
                o = json.loads(line)
                ds.append(InteractionRecord(
                    o["query_index"], QueryTag(o["tag"]),
                    np.array(o["y"], dtype=float),
                    np.array(o["x"], dtype=float), float(o["J0"])))
        return ds


@dataclass
class OracleConfig:
    model: ResponseModel
    leader: LeaderParams
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


class FollowerOracle:
    """Simulates the community the tariff designer queries.

    Holds the true response model privately; callers only see responses.
    Queries are serialized (single logical consumer).
    """

    def __init__(self, config: OracleConfig):
        self._model = config.model
        self._leader = config.leader
        self._noise_std = config.noise_std
        self._rng = np.random.Generator(np.random.Philox(config.seed))
        self._projector = PolyhedronProjector(config.model.feasible_set)
        self.dataset = InteractionDataset()

    @property
    def query_count(self) -> int:
        return self.dataset.query_count

    @property
    def horizon(self) -> int:
        return self._model.horizon

    @property
    def dim(self) -> int:
        return self._model.dim

    def query(self, y: np.ndarray, tag: QueryTag = QueryTag.NOMINAL) -> np.ndarray:
        """Equilibrium response to tariff y; logs and counts the interaction."""
        y = np.asarray(y, dtype=float)
        rep = self._projector.project(self._model.pre_projection(y))
        if rep.status is not SolveStatus.OPTIMAL:
            raise OracleError(f"response projection failed: {rep.status.value} "
                              f"(residuals {rep.primal_residual:.2e}/"
                              f"{rep.dual_residual:.2e})")
        x = rep.solution
        if self._noise_std > 0:
            x = x + self._rng.normal(0.0, self._noise_std, size=x.shape)
        J0 = eval_leader_objective(y, x, self._leader)
        self.dataset.append(InteractionRecord(self.dataset.query_count, tag,
                                              y.copy(), x.copy(), J0))
        return x.copy()

    def eval_tariff(self, y: np.ndarray, tag: QueryTag = QueryTag.NOMINAL):
        """Query plus the resulting leader objective, as one interaction."""
        x = self.query(y, tag)
        return x, self.dataset.records[-1].J0


@dataclass
class VgneReport:
    stationarity_residual: float
    feasibility_violation: float
    complementarity_residual: float
    multipliers: np.ndarray

    @property
    def worst_residual(self) -> float:
        return max(self.stationarity_residual, self.feasibility_violation,
                   self.complementarity_residual)


def verify_vgne(y: np.ndarray, x: np.ndarray, game: FollowerGame,
                active_tol: float = 1e-6) -> VgneReport:
    """KKT check of the equilibrium variational inequality at (y, x).

    Builds the stacked cost gradients F and fits nonnegative multipliers on
    the near-active rows of the joint feasible set; residuals report how far
    (x, multipliers) is from stationarity, feasibility and complementarity.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    F = follower_pseudogradient(x, y, game)
    omega = game.stacked_constraints()
    slack = omega.h - omega.G @ x
    feas = float(max(np.max(-slack, initial=0.0), 0.0))
    scale = 1.0 + float(np.max(np.abs(omega.h), initial=0.0))
    active = slack <= active_tol * scale
    theta = np.zeros(omega.num_rows)
    if np.any(active):
        Gt = omega.G[active].T
        sol, _ = scipy.optimize.nnls(Gt, -F, maxiter=10 * Gt.shape[1] + 100)
        theta[active] = sol
    stat = float(np.max(np.abs(F + omega.G.T @ theta), initial=0.0))
    compl = float(abs(theta @ slack))
    return VgneReport(stat, feas, compl, theta)


def sample_feasible_points(poly: Polyhedron, n_samples: int, seed: int = 0,
                           burn_in: int = 50) -> np.ndarray:
    """Hit-and-run samples from a (bounded, full-dimensional) polyhedron."""
    rng = np.random.Generator(np.random.Philox(seed))
    from .qp_engine import find_feasible_point
    x = find_feasible_point(poly, margin=True)
    if x is None:
        raise ValueError("cannot sample: set is empty")
    G, h = poly.G, poly.h
    out = np.empty((n_samples, poly.dim))
    kept = 0
    total = burn_in + n_samples
    for it in range(total):
        d = rng.normal(size=poly.dim)
        d /= np.linalg.norm(d)
        Gd = G @ d
        slack = h - G @ x
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = slack / Gd
        upper = np.min(ratios[Gd > 1e-14], initial=np.inf)
        lower = np.max(ratios[Gd < -1e-14], initial=-np.inf)
        if not np.isfinite(upper) or not np.isfinite(lower):
            raise ValueError("cannot sample: set appears unbounded")
        if upper <= lower:
            continue
        x = x + rng.uniform(lower, upper) * d
        if it >= burn_in:
            out[kept] = x
            kept += 1
    return out[:kept]

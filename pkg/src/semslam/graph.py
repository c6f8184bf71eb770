"""Sparse factor graph over the product manifold of poses, points, planes and
quadrics, optimized by damped (Levenberg-Marquardt) normal equations."""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from . import factors as fac
from .errors import (
    BehindCameraError,
    DegenerateProjectionError,
    EvaluationError,
    InvalidArgumentError,
)
from .geometry import DualQuadric, Plane, Pose

log = logging.getLogger(__name__)

_KIND_ORDER = {"pose": 0, "point": 1, "plane": 2, "quadric": 3}
_SKIP_ERRORS = (BehindCameraError, DegenerateProjectionError, EvaluationError)


@dataclass(frozen=True, order=True)
class VariableId:
    kind: str
    index: int

    def __post_init__(self):
        if self.kind not in _KIND_ORDER:
            raise InvalidArgumentError(f"unknown variable kind {self.kind!r}")


@dataclass
class OptimizerConfig:
    max_iterations: int = 50
    lambda_init: float = 1e-4
    lambda_scale: float = 10.0
    abs_tol: float = 1e-12
    rel_tol: float = 1e-9
    parallel_eval: bool = False

    def __post_init__(self):
        if self.max_iterations <= 0 or self.lambda_init <= 0 or self.lambda_scale <= 1:
            raise InvalidArgumentError("optimizer controls must be positive (scale > 1)")
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise InvalidArgumentError("tolerances must be positive")


@dataclass
class OptimizeReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    status: str = "converged"
    skipped_factors: int = 0

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "converged": self.converged,
            "status": self.status,
            "skipped_factors": self.skipped_factors,
        }


def _validated(kind: str, value):
    if kind == "pose":
        if not isinstance(value, Pose):
            raise InvalidArgumentError("pose variable expects a Pose")
        value.validate()
        return value
    if kind == "point":
        x = np.asarray(value, dtype=float).reshape(3)
        if not np.all(np.isfinite(x)):
            raise InvalidArgumentError("point has non-finite entries")
        return x
    if kind == "plane":
        return value if isinstance(value, Plane) else Plane(value)
    if kind == "quadric":
        if not isinstance(value, DualQuadric):
            raise InvalidArgumentError("quadric variable expects a DualQuadric")
        value.frame.validate()
        return value
    raise InvalidArgumentError(f"unknown variable kind {kind!r}")


class Graph:
    """Variables plus typed factors; at least one pose must be fixed to optimize."""

    def __init__(self):
        self._values: dict[VariableId, object] = {}
        self._factors: list[fac.Factor] = []
        self._fixed: set[VariableId] = set()
        self._counters = {k: 0 for k in _KIND_ORDER}

    # -- construction -------------------------------------------------------

    def add_variable(self, kind: str, value) -> VariableId:
        vid = VariableId(kind, self._counters[kind])
        self._values[vid] = _validated(kind, value)
        self._counters[kind] += 1
        return vid

    def add_factor(self, factor: fac.Factor) -> int:
        for vid, expected in zip(factor.variable_ids, factor.variable_kinds):
            if vid not in self._values:
                raise InvalidArgumentError(f"factor references unknown variable {vid}")
            if vid.kind != expected:
                raise InvalidArgumentError(
                    f"factor expects kind {expected!r}, got {vid.kind!r}")
        self._factors.append(factor)
        return len(self._factors) - 1

    def fix(self, vid: VariableId) -> None:
        if vid not in self._values:
            raise InvalidArgumentError(f"unknown variable {vid}")
        self._fixed.add(vid)

    # -- access -------------------------------------------------------------

    def value(self, vid: VariableId):
        return self._values[vid]

    def set_value(self, vid: VariableId, value) -> None:
        if vid not in self._values:
            raise InvalidArgumentError(f"unknown variable {vid}")
        self._values[vid] = _validated(vid.kind, value)

    def variable_ids(self, kind: str | None = None) -> list[VariableId]:
        ids = sorted(self._values, key=lambda v: (_KIND_ORDER[v.kind], v.index))
        return ids if kind is None else [v for v in ids if v.kind == kind]

    @property
    def factors(self) -> list[fac.Factor]:
        return list(self._factors)

    @property
    def fixed(self) -> set[VariableId]:
        return set(self._fixed)

    def __len__(self):
        return len(self._values)

    # -- evaluation ---------------------------------------------------------

    def _factor_values(self, factor: fac.Factor) -> list:
        return [self._values[vid] for vid in factor.variable_ids]

    def _weighted_residual(self, factor: fac.Factor):
        """Whitened, robust-weighted residual or None when inactive."""
        try:
            r = np.atleast_1d(factor.residual(self._factor_values(factor)))
        except _SKIP_ERRORS:
            return None
        if not factor.is_active(r):
            return None
        rw = factor.noise.whiten(r)
        w = fac.huber_weight(float(np.linalg.norm(rw)), factor.robust)
        return np.sqrt(w) * rw

    def total_cost(self) -> float:
        """Sum of robust-weighted squared Mahalanobis residuals over active factors."""
        cost = 0.0
        for factor in self._factors:
            rw = self._weighted_residual(factor)
            if rw is not None:
                cost += float(rw @ rw)
        return cost

    # -- optimization -------------------------------------------------------

    def optimize(self, cfg: OptimizerConfig | None = None) -> OptimizeReport:
        cfg = cfg or OptimizerConfig()
        if not any(v.kind == "pose" for v in self._fixed):
            raise InvalidArgumentError("at least one pose must be fixed before optimizing")

        free = [v for v in self.variable_ids() if v not in self._fixed]
        offsets: dict[VariableId, int] = {}
        n_cols = 0
        for vid in free:
            offsets[vid] = n_cols
            n_cols += fac.tangent_dim(self._values[vid])

        workers = 1
        if cfg.parallel_eval:
            workers = max(1, min(os.cpu_count() or 1,
                                 int(os.environ.get("SEMSLAM_THREADS", "4"))))

        initial_cost = self.total_cost()
        cost = initial_cost
        lam = cfg.lambda_init
        iterations = 0
        skipped = 0
        status = "max-iterations"
        converged = False

        if initial_cost <= cfg.abs_tol:
            return OptimizeReport(0, initial_cost, initial_cost, True, "converged")

        for _ in range(cfg.max_iterations):
            linearized, skipped = self._linearize(free, offsets, n_cols, workers)
            if linearized is None:
                status, converged = "converged", True
                break
            J, r = linearized
            H = (J.T @ J).tocsc()
            g = J.T @ r
            diag = H.diagonal()
            damp_base = np.where(diag > 1e-12, diag, 1.0)

            accepted = False
            solver_failed = False
            while lam <= 1e12:
                A = H + scipy.sparse.diags(lam * damp_base)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    try:
                        dx = scipy.sparse.linalg.spsolve(A, -g)
                    except RuntimeError:
                        dx = np.full(n_cols, np.nan)
                if not np.all(np.isfinite(dx)):
                    solver_failed = True
                    lam *= cfg.lambda_scale
                    continue
                solver_failed = False
                trial = {vid: fac.retract_value(self._values[vid],
                                                dx[offsets[vid]:offsets[vid] + fac.tangent_dim(self._values[vid])])
                         for vid in free}
                saved = {vid: self._values[vid] for vid in free}
                self._values.update(trial)
                trial_cost = self.total_cost()
                if trial_cost < cost:
                    accepted = True
                    lam = max(lam / cfg.lambda_scale, 1e-12)
                    break
                self._values.update(saved)
                lam *= cfg.lambda_scale

            if not accepted:
                if solver_failed:
                    status, converged = "numerical-failure", False
                else:
                    # no improving step exists at any damping: local minimum
                    status, converged = "converged", True
                break

            iterations += 1
            drop = cost - trial_cost
            cost = trial_cost
            if drop < cfg.abs_tol or drop < cfg.rel_tol * max(cost, 1e-300):
                status, converged = "converged", True
                break

        else:
            status = "max-iterations"

        if skipped:
            log.debug("optimize: %d factor(s) skipped in last linearization", skipped)
        return OptimizeReport(iterations, initial_cost, cost, converged, status, skipped)

    def _linearize(self, free, offsets, n_cols, workers):
        """Assemble the whitened, robust-weighted sparse Jacobian and residual."""

        def eval_one(factor: fac.Factor):
            values = self._factor_values(factor)
            try:
                r = np.atleast_1d(factor.residual(values))
                if not factor.is_active(r):
                    return None
                Js = factor.jacobians(values)
            except _SKIP_ERRORS:
                return None
            rw = factor.noise.whiten(r)
            w = fac.huber_weight(float(np.linalg.norm(rw)), factor.robust)
            sw = np.sqrt(w)
            return sw * rw, [sw * factor.noise.whiten_jacobian(J) for J in Js]

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(eval_one, self._factors))
        else:
            results = [eval_one(f) for f in self._factors]

        rows_list, cols_list, data_list, resid = [], [], [], []
        row0 = 0
        skipped = 0
        for factor, result in zip(self._factors, results):
            if result is None:
                skipped += 1
                continue
            rw, Js = result
            dim = rw.size
            resid.append(rw)
            for vid, J in zip(factor.variable_ids, Js):
                if vid in self._fixed:
                    continue
                c0 = offsets[vid]
                d = J.shape[1]
                rows_list.append(np.repeat(np.arange(row0, row0 + dim), d))
                cols_list.append(np.tile(np.arange(c0, c0 + d), dim))
                data_list.append(np.asarray(J, dtype=float).ravel())
            row0 += dim

        if not resid:
            return None, skipped
        J = scipy.sparse.coo_matrix(
            (np.concatenate(data_list) if data_list else np.empty(0),
             (np.concatenate(rows_list) if rows_list else np.empty(0, dtype=int),
              np.concatenate(cols_list) if cols_list else np.empty(0, dtype=int))),
            shape=(row0, n_cols)).tocsr()
        return (J, np.concatenate(resid)), skipped

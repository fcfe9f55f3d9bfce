"""Levenberg-Marquardt over a single rigid pose with a numeric Jacobian.

The state is always the current pose; each iteration linearizes the residual
in a local 6-vector increment (axis-angle radians, then millimetres) that is
left-composed onto the pose about a fixed pivot point.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonPositiveDepth, SingularNormalEquations
from .geometry import RigidPose, apply_increment

ROT_STEP = 1e-6  # rad
TRANS_STEP = 1e-4  # mm

ResidualFn = Callable[[RigidPose], np.ndarray]


@dataclass
class LMResult:
    pose: RigidPose
    cost: float
    initial_cost: float
    iterations: int
    costs: list[float] = field(default_factory=list)  # cost after every accepted step, starting at pose0
    stop_reason: str = ""


def _steps(rot_step, trans_step):
    return np.array([rot_step] * 3 + [trans_step] * 3)


def numeric_jacobian(
    residual_fn: ResidualFn,
    pose: RigidPose,
    pivot=None,
    r0: np.ndarray | None = None,
    scheme: str = "forward",
    rot_step: float = ROT_STEP,
    trans_step: float = TRANS_STEP,
) -> np.ndarray:
    """Finite-difference Jacobian of ``residual_fn`` w.r.t. the local increment."""
    h = _steps(rot_step, trans_step)
    if scheme == "forward" and r0 is None:
        r0 = residual_fn(pose)
    cols = []
    for k in range(6):
        e = np.zeros(6)
        e[k] = h[k]
        if scheme == "forward":
            cols.append((residual_fn(apply_increment(pose, e, pivot)) - r0) / h[k])
        elif scheme == "central":
            rp = residual_fn(apply_increment(pose, e, pivot))
            rm = residual_fn(apply_increment(pose, -e, pivot))
            cols.append((rp - rm) / (2.0 * h[k]))
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
    return np.stack(cols, axis=1)


def levenberg_marquardt(
    residual_fn: ResidualFn,
    pose0: RigidPose,
    pivot=None,
    max_iters: int = 50,
    ftol: float = 1e-12,
    xtol: float = 1e-12,
    gtol: float = 1e-14,
    lambda0: float = 1e-3,
    lambda_max: float = 1e10,
) -> LMResult:
    """Minimize ``sum(residual_fn(pose) ** 2)`` starting from ``pose0``.

    Damping uses Marquardt's diagonal scaling so rotation (rad) and
    translation (mm) columns are treated on comparable footing. Only steps
    that strictly decrease the cost are accepted, so the returned cost never
    exceeds the initial one.
    """
    pose = pose0
    r = residual_fn(pose)
    cost = float(r @ r)
    initial = cost
    costs = [cost]
    lam = lambda0
    reason = "max_iters"
    it = 0
    if cost == 0.0:
        return LMResult(pose, cost, initial, 0, costs, "zero_residual")
    for it in range(1, max_iters + 1):
        J = numeric_jacobian(residual_fn, pose, pivot, r0=r)
        if not np.all(np.isfinite(J)):
            raise SingularNormalEquations("non-finite Jacobian")
        A = J.T @ J
        g = J.T @ r
        if np.max(np.abs(g)) <= gtol * max(cost, 1.0):
            reason = "gtol"
            break
        d = np.diag(A).copy()
        dmax = d.max()
        if dmax <= 0.0:
            raise SingularNormalEquations("Jacobian is identically zero")
        d = np.maximum(d, 1e-12 * dmax)
        accepted = False
        solved = False
        while lam <= lambda_max:
            M = A + lam * np.diag(d)
            try:
                delta = -np.linalg.solve(M, g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is None or not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            solved = True
            cand = apply_increment(pose, delta, pivot)
            try:
                r_new = residual_fn(cand)
            except NonPositiveDepth:
                lam *= 10.0
                continue
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            if not solved:
                raise SingularNormalEquations("normal equations singular at maximum damping")
            reason = "no_descent"
            break
        rel = (cost - cost_new) / cost
        pose, r, cost = cand, r_new, cost_new
        costs.append(cost)
        lam = max(lam / 10.0, 1e-12)
        if cost == 0.0:
            reason = "zero_residual"
            break
        if rel < ftol:
            reason = "ftol"
            break
        if np.linalg.norm(delta) < xtol:
            reason = "xtol"
            break
    return LMResult(pose, cost, initial, it, costs, reason)

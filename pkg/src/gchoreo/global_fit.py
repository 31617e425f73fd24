"""Joint refinement of all dancers: penetration, anchors, depth order, ground contact.

The global objective re-uses the reprojection term across every dancer and adds
lpen*E_pen + lreg*sum_p E_reg + ldep*sum E_dep + lgc*sum_p E_gc. The ground
plane is estimated once from contact feet (robust Huber objective with a
unit-norm penalty) before the joint descent over all {theta, tau}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import minimize

from .body_model import (
    Camera,
    GroundPlane,
    MotionSequence,
    Skeleton,
    bone_segments_t,
    forward_kinematics_t,
    motion_joints,
    segment_clearance_t,
)
from .errors import (
    DegenerateGeometryError,
    InvalidArgumentError,
    OptimizationFailureError,
)
from .local_fit import ContactLabels, _reproj_from_joints
from .numerics import as_tensor, huber, softplus


@dataclass
class DepthAnnotation:
    """Ordinal depth labels: rows (frame, dancer_p, dancer_q, r) with r in {-1, 0, 1}.

    r = 1 means p is closer to the camera than q (smaller depth z).
    """

    items: np.ndarray

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64).reshape(-1, 4)
        if self.items.size and not np.isin(self.items[:, 3], (-1, 0, 1)).all():
            raise InvalidArgumentError("depth relation r must be -1, 0, or 1")
        seen = {}
        for t, p, q, r in self.items:
            if p == q:
                raise InvalidArgumentError("depth annotation must reference two distinct dancers")
            key = (int(t), int(p), int(q))
            rev = (int(t), int(q), int(p))
            if rev in seen and seen[rev] != -int(r):
                raise InvalidArgumentError(
                    f"annotation at frame {t} for pair ({p},{q}) violates antisymmetry"
                )
            seen[key] = int(r)

    def validate_against(self, n_dancers: int, n_frames: int) -> None:
        if self.items.size == 0:
            return
        if self.items[:, 0].min() < 0 or self.items[:, 0].max() >= n_frames:
            raise InvalidArgumentError("depth annotation frame out of range")
        dancers = self.items[:, 1:3]
        if dancers.min() < 0 or dancers.max() >= n_dancers:
            raise InvalidArgumentError("depth annotation dancer index out of range")


@dataclass
class GlobalFitConfig:
    lambda_pen: float = 1.0
    lambda_reg: float = 0.1
    lambda_dep: float = 1.0
    lambda_gc: float = 10.0
    huber_plane: float = 0.05
    plane_penalty: float = 10.0
    huber_px: float = 1.0
    iterations: int = 300
    lr: float = 1e-2
    lr_decay: float = 0.01  # lr factor reached by the final iteration
    warmup_fraction: float = 0.3  # leading fraction of the budget that moves taus only

    def __post_init__(self):
        for name in ("lambda_pen", "lambda_reg", "lambda_dep", "lambda_gc"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be non-negative")
        if self.huber_plane <= 0:
            raise InvalidArgumentError("huber_plane must be positive")


def _group_joints(thetas_list, taus_list, betas, skeleton):
    return [
        forward_kinematics_t(th, ta, be, skeleton)
        for th, ta, be in zip(thetas_list, taus_list, betas)
    ]


def e_pen_from_joints(joints_list, skeleton: Skeleton) -> torch.Tensor:
    """Squared-hinge capsule penetration summed over inter-dancer bone pairs."""
    n = len(joints_list)
    segs = [bone_segments_t(j, skeleton) for j in joints_list]
    total = torch.zeros((), dtype=joints_list[0].dtype)
    for p in range(n):
        for q in range(p + 1, n):
            a0, a1, ra = segs[p]
            b0, b1, rb = segs[q]
            clear = segment_clearance_t(
                a0[:, :, None, :], a1[:, :, None, :], ra[:, None],
                b0[:, None, :, :], b1[:, None, :, :], rb[None, :],
            )
            total = total + (torch.clamp(-clear, min=0.0) ** 2).sum()
    return total


def e_pen_t(thetas_list, taus_list, betas, skeleton: Skeleton) -> torch.Tensor:
    if len(thetas_list) < 2:
        raise InvalidArgumentError("penetration energy needs at least two dancers")
    return e_pen_from_joints(_group_joints(thetas_list, taus_list, betas, skeleton), skeleton)


def e_pen(motions, skeleton: Skeleton) -> float:
    return float(
        e_pen_t(
            [as_tensor(m.thetas) for m in motions],
            [as_tensor(m.taus) for m in motions],
            [as_tensor(m.beta) for m in motions],
            skeleton,
        )
    )


def max_penetration(motions, skeleton: Skeleton) -> float:
    """Deepest inter-dancer capsule overlap in meters (0 when none)."""
    deepest = 0.0
    joints = [as_tensor(motion_joints(m, skeleton)) for m in motions]
    segs = [bone_segments_t(j, skeleton) for j in joints]
    for p in range(len(motions)):
        for q in range(p + 1, len(motions)):
            a0, a1, ra = segs[p]
            b0, b1, rb = segs[q]
            clear = segment_clearance_t(
                a0[:, :, None, :], a1[:, :, None, :], ra[:, None],
                b0[:, None, :, :], b1[:, None, :, :], rb[None, :],
            )
            deepest = max(deepest, float((-clear).clamp(min=0.0).max()))
    return deepest


def e_reg_t(thetas: torch.Tensor, anchor_thetas: torch.Tensor) -> torch.Tensor:
    if thetas.shape != anchor_thetas.shape:
        raise InvalidArgumentError("motion and anchor must have equal theta shapes")
    d = thetas - anchor_thetas
    return (d * d).sum()


def e_reg(motion: MotionSequence, anchor: MotionSequence) -> float:
    return float(e_reg_t(as_tensor(motion.thetas), as_tensor(anchor.thetas)))


def e_dep_t(taus_list, annotation: DepthAnnotation) -> torch.Tensor:
    """Ordinal-depth energy over annotated (frame, p, q, r) rows.

    r=1 penalizes softplus(z_p - z_q), r=-1 the mirror image, r=0 the squared gap.
    """
    total = torch.zeros((), dtype=taus_list[0].dtype)
    for t, p, q, r in annotation.items:
        zp = taus_list[p][t, 2]
        zq = taus_list[q][t, 2]
        if r == 1:
            total = total + softplus(zp - zq)
        elif r == -1:
            total = total + softplus(zq - zp)
        elif r == 0:
            total = total + (zp - zq) ** 2
        else:
            raise InvalidArgumentError(f"invalid depth relation {r}")
    return total


def e_dep(motions, annotation: DepthAnnotation) -> float:
    annotation.validate_against(len(motions), motions[0].num_frames)
    return float(e_dep_t([as_tensor(m.taus) for m in motions], annotation))


def e_gc_from_joints(joints, contacts: ContactLabels, plane: GroundPlane, skeleton: Skeleton) -> torch.Tensor:
    feet = joints[:, list(skeleton.feet), :]
    c = as_tensor(contacts.labels[:-1])
    vel_sq = ((feet[1:] - feet[:-1]) ** 2).sum(dim=-1)
    normal = as_tensor(plane.normal)
    dist = ((feet[:-1] - as_tensor(plane.point)) * normal).sum(dim=-1)
    return (c * vel_sq).sum() + (c * dist * dist).sum()


def e_gc_t(thetas, taus, beta, contacts, plane, skeleton) -> torch.Tensor:
    joints = forward_kinematics_t(thetas, taus, beta, skeleton)
    return e_gc_from_joints(joints, contacts, plane, skeleton)


def e_gc(motion, contacts, plane, skeleton) -> float:
    return float(
        e_gc_t(as_tensor(motion.thetas), as_tensor(motion.taus), as_tensor(motion.beta),
               contacts, plane, skeleton)
    )


def weighted_geometric_median(points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weiszfeld iteration; rotation-equivariant robust center of the points."""
    f = np.average(points, axis=0, weights=weights)
    for _ in range(200):
        d = np.linalg.norm(points - f, axis=1)
        inv = weights / np.maximum(d, 1e-12)
        f_new = (points * inv[:, None]).sum(axis=0) / inv.sum()
        if np.abs(f_new - f).max() < 1e-14:
            return f_new
        f = f_new
    return f


def plane_objective_t(
    n: torch.Tensor, points: torch.Tensor, f: torch.Tensor, delta: float, penalty: float
) -> torch.Tensor:
    """Huber plane objective: sum H((X - f) . n/||n||) + penalty * (n.n - 1)^2."""
    unit = n / n.norm()
    r = ((points - f) * unit).sum(dim=-1)
    norm_sq = (n * n).sum()
    return huber(r, delta).sum() + penalty * (norm_sq - 1.0) ** 2


def fit_ground_plane(
    feet_positions: np.ndarray,
    delta: float = 0.05,
    weights=None,
    toward=None,
    penalty: float = 10.0,
) -> GroundPlane:
    """Robust plane through contact-foot positions.

    The plane point is the weighted median of the inputs (held fixed); the
    normal minimizes the Huber objective with a unit-norm penalty, then is
    renormalized. The sign points toward `toward` when given, else toward the
    axis on which the normal is largest.
    """
    points = np.asarray(feet_positions, dtype=np.float64).reshape(-1, 3)
    m = points.shape[0]
    if m < 3:
        raise DegenerateGeometryError(f"plane fit needs >= 3 points, got {m}")
    weights = np.ones(m) if weights is None else np.asarray(weights, dtype=np.float64)

    f = weighted_geometric_median(points, weights)

    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / m
    eigvals, eigvecs = np.linalg.eigh(cov)
    # collinear or coincident inputs leave the normal underdetermined
    if eigvals[1] < 1e-12:
        raise DegenerateGeometryError("contact points are collinear or coincident")
    n0 = eigvecs[:, 0]

    points_t = as_tensor(points)
    f_t = as_tensor(f)

    def objective(x: np.ndarray):
        n = as_tensor(x, requires_grad=True)
        value = plane_objective_t(n, points_t, f_t, delta, penalty)
        (grad,) = torch.autograd.grad(value, n)
        return float(value.detach()), grad.numpy()

    result = minimize(objective, n0, jac=True, method="L-BFGS-B",
                      options={"maxiter": 500, "ftol": 1e-15, "gtol": 1e-12})
    n = result.x / np.linalg.norm(result.x)

    # IRLS polish: the data term depends on the direction only, so iterating the
    # Huber-weighted eigenproblem drives n to the stationary direction far
    # tighter than L-BFGS resolves the C1 kinks (and stays rotation-equivariant).
    d = points - f
    for _ in range(200):
        r = d @ n
        a = np.abs(r)
        w = np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))
        weighted_cov = d.T @ (d * w[:, None])
        vals, vecs = np.linalg.eigh(weighted_cov)
        n_new = vecs[:, 0]
        if float(n_new @ n) < 0:
            n_new = -n_new
        done = np.abs(n_new - n).max() < 1e-15
        n = n_new
        if done:
            break

    if toward is not None:
        toward = np.asarray(toward, dtype=np.float64)
        if float(n @ (toward - f)) < 0:
            n = -n
    elif n[np.argmax(np.abs(n))] < 0:
        n = -n
    return GroundPlane(normal=n, point=f)


def global_terms_t(
    thetas_list,
    taus_list,
    betas,
    tracks,
    contacts_list,
    camera: Camera,
    annotation: DepthAnnotation,
    plane: GroundPlane,
    anchor_thetas,
    skeleton: Skeleton,
    config: GlobalFitConfig,
) -> dict:
    """All Eq-2 terms as tensors, one FK pass per dancer."""
    joints_list = _group_joints(thetas_list, taus_list, betas, skeleton)
    e_j = torch.zeros((), dtype=thetas_list[0].dtype)
    e_gc_sum = torch.zeros_like(e_j)
    e_reg_sum = torch.zeros_like(e_j)
    for joints, track, contacts, thetas, anchor in zip(
        joints_list, tracks, contacts_list, thetas_list, anchor_thetas
    ):
        e_j = e_j + _reproj_from_joints(joints, track, camera, config.huber_px)
        e_gc_sum = e_gc_sum + e_gc_from_joints(joints, contacts, plane, skeleton)
        e_reg_sum = e_reg_sum + e_reg_t(thetas, anchor)
    terms = {
        "e_j": e_j,
        "e_pen": e_pen_from_joints(joints_list, skeleton) if len(joints_list) > 1 else torch.zeros_like(e_j),
        "e_reg": e_reg_sum,
        "e_dep": e_dep_t(taus_list, annotation),
        "e_gc": e_gc_sum,
    }
    terms["total"] = (
        terms["e_j"]
        + config.lambda_pen * terms["e_pen"]
        + config.lambda_reg * terms["e_reg"]
        + config.lambda_dep * terms["e_dep"]
        + config.lambda_gc * terms["e_gc"]
    )
    return terms


def e_global_total(
    motions, tracks, contacts_list, camera, annotation, plane, anchors, skeleton, config
) -> float:
    annotation.validate_against(len(motions), motions[0].num_frames)
    terms = global_terms_t(
        [as_tensor(m.thetas) for m in motions],
        [as_tensor(m.taus) for m in motions],
        [as_tensor(m.beta) for m in motions],
        tracks,
        contacts_list,
        camera,
        annotation,
        plane,
        [as_tensor(a.thetas) for a in anchors],
        skeleton,
        config,
    )
    return float(terms["total"])


def contact_feet_positions(motions, contacts_list, skeleton: Skeleton) -> np.ndarray:
    """World positions of every labeled-contact foot joint across all dancers."""
    points = []
    for motion, contacts in zip(motions, contacts_list):
        joints = motion_joints(motion, skeleton)
        feet = joints[:, list(skeleton.feet), :]
        mask = contacts.labels.astype(bool)
        points.append(feet[mask])
    if not points:
        return np.zeros((0, 3))
    return np.concatenate(points, axis=0)


def fit_global(
    local_motions,
    tracks,
    contacts_list,
    camera: Camera,
    annotation: DepthAnnotation,
    skeleton: Skeleton,
    config: GlobalFitConfig,
    plane: GroundPlane | None = None,
):
    """Plane fit followed by joint Adam refinement of every dancer's {theta, tau}.

    Returns (motions, plane, trace); the trace's accepted rows are non-increasing
    and the result is never worse than the initialization.
    """
    n = len(local_motions)
    if n < 1:
        raise InvalidArgumentError("need at least one dancer")
    annotation.validate_against(n, local_motions[0].num_frames)

    if plane is None:
        points = contact_feet_positions(local_motions, contacts_list, skeleton)
        mean_root = np.mean(np.concatenate([m.taus for m in local_motions]), axis=0)
        plane = fit_ground_plane(
            points, delta=config.huber_plane, toward=mean_root, penalty=config.plane_penalty
        )

    thetas_list = [as_tensor(m.thetas.copy(), requires_grad=True) for m in local_motions]
    taus_list = [as_tensor(m.taus.copy(), requires_grad=True) for m in local_motions]
    betas = [as_tensor(m.beta) for m in local_motions]
    anchor_thetas = [as_tensor(m.thetas) for m in local_motions]

    def evaluate() -> dict:
        return global_terms_t(
            thetas_list, taus_list, betas, tracks, contacts_list, camera,
            annotation, plane, anchor_thetas, skeleton, config,
        )

    def snapshot():
        return [
            MotionSequence(
                thetas=th.detach().numpy().copy(),
                taus=ta.detach().numpy().copy(),
                beta=m.beta.copy(),
                fps=m.fps,
            )
            for th, ta, m in zip(thetas_list, taus_list, local_motions)
        ]

    terms = evaluate()
    best_energy = float(terms["total"].detach())
    if not math.isfinite(best_energy):
        raise OptimizationFailureError("initial global energy is non-finite", last_iterate=local_motions)
    best = snapshot()

    all_params = thetas_list + taus_list
    warmup = int(round(config.warmup_fraction * config.iterations))
    stages = [(taus_list, warmup), (all_params, config.iterations - warmup)]
    trace = []
    iteration = 0
    for params, budget in stages:
        if budget < 1:
            continue
        opt = torch.optim.Adam(params, lr=config.lr)
        scheduler = torch.optim.lr_scheduler.ExponentialLR(
            opt, gamma=config.lr_decay ** (1.0 / budget)
        )
        for _ in range(budget):
            for p in all_params:
                p.grad = None
            terms["total"].backward()
            opt.step()
            scheduler.step()
            iteration += 1
            terms = evaluate()
            value = float(terms["total"].detach())
            if not math.isfinite(value):
                raise OptimizationFailureError(
                    f"global energy diverged at iteration {iteration}", last_iterate=best
                )
            accepted = value <= best_energy
            if accepted:
                best_energy = value
                best = snapshot()
            row = {k: float(v.detach()) for k, v in terms.items()}
            row.update(iteration=iteration, accepted=accepted)
            trace.append(row)
    return best, plane, trace

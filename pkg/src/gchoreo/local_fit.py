"""Per-dancer sequence fitting: reprojection, priors, smoothness, foot contacts.

The total objective is E_J + lt*E_theta + lb*E_beta + ls*E_S + lf*E_F, minimized
over the pose sequence {theta_t}, the trajectory {tau_t}, and the shape beta
with a three-stage Adam schedule (tau only, then tau+theta, then everything).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .body_model import (
    Camera,
    GroundPlane,
    MotionSequence,
    Skeleton,
    forward_kinematics_t,
    motion_joints,
    project_t,
)
from .errors import BehindCameraError, InvalidArgumentError, OptimizationFailureError
from .numerics import as_tensor


@dataclass
class KeypointTrack:
    """Per-frame 2D keypoints (T, J, 2) in pixels with confidences (T, J) in [0, 1]."""

    positions: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        if self.positions.ndim != 3 or self.positions.shape[2] != 2:
            raise InvalidArgumentError("keypoint positions must be (T, J, 2)")
        if self.confidences.shape != self.positions.shape[:2]:
            raise InvalidArgumentError("confidences must be (T, J)")
        if np.any(self.confidences < 0) or np.any(self.confidences > 1):
            raise InvalidArgumentError("confidences must lie in [0, 1]")


@dataclass
class ContactLabels:
    """Binary contact labels (T, len(skeleton.feet)), column order = skeleton.feet."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise InvalidArgumentError("contact labels must be (T, n_feet)")
        if not np.isin(self.labels, (0, 1)).all():
            raise InvalidArgumentError("contact labels must be 0 or 1")
        self.labels = self.labels.astype(np.float64)


@dataclass
class LocalFitConfig:
    lambda_theta: float = 1.0
    lambda_beta: float = 0.1
    lambda_smooth: float = 10.0
    lambda_foot: float = 10.0
    huber_px: float = 1.0
    iterations: int = 500
    lr_pose: float = 1e-2
    lr_shape: float = 1e-3
    lr_decay: float = 0.01  # lr factor reached by each stage's final iteration
    tol: float = 0.0  # relative energy decrease below which a stage stops early
    stage_fractions: tuple = (0.15, 0.35, 0.50)

    def __post_init__(self):
        for name in ("lambda_theta", "lambda_beta", "lambda_smooth", "lambda_foot"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be non-negative")
        if self.iterations < 1:
            raise InvalidArgumentError("iteration budget must be >= 1")
        if self.huber_px <= 0:
            raise InvalidArgumentError("huber_px must be positive")


def _huber_of_sqnorm(sq: torch.Tensor, delta: float) -> torch.Tensor:
    """Huber penalty of sqrt(sq) without a non-differentiable sqrt at zero."""
    d2 = delta * delta
    guarded = torch.where(sq > d2, sq, torch.ones_like(sq))
    linear = delta * (guarded.sqrt() - 0.5 * delta)
    return torch.where(sq <= d2, 0.5 * sq, linear)


def e_reproj_t(
    thetas: torch.Tensor,
    taus: torch.Tensor,
    beta: torch.Tensor,
    track: KeypointTrack,
    camera: Camera,
    skeleton: Skeleton,
    huber_px: float = 1.0,
) -> torch.Tensor:
    joints = forward_kinematics_t(thetas, taus, beta, skeleton)
    z = joints[..., 2]
    if bool((z <= 1e-6).any()):
        bad = torch.nonzero(z <= 1e-6)[0]
        raise BehindCameraError(frame=int(bad[0]), joint=int(bad[1]), depth=float(z[bad[0], bad[1]]))
    pix = project_t(joints, camera)
    residual = pix - as_tensor(track.positions)
    sq = (residual * residual).sum(dim=-1)
    conf = as_tensor(track.confidences)
    return (conf * _huber_of_sqnorm(sq, huber_px)).sum()


def e_pose_prior_t(thetas: torch.Tensor) -> torch.Tensor:
    """Quadratic prior toward the rest pose (theta = 0)."""
    return (thetas * thetas).sum()


def e_shape_prior_t(beta: torch.Tensor) -> torch.Tensor:
    return (beta * beta).sum()


def e_smooth_t(thetas: torch.Tensor, taus: torch.Tensor, beta: torch.Tensor, skeleton: Skeleton) -> torch.Tensor:
    if thetas.shape[0] < 2:
        raise InvalidArgumentError("smoothness needs at least two frames")
    joints = forward_kinematics_t(thetas, taus, beta, skeleton)
    dtheta = thetas[1:] - thetas[:-1]
    dx = joints[1:] - joints[:-1]
    return (dtheta * dtheta).sum() + (dx * dx).sum()


def e_foot_t(
    thetas: torch.Tensor,
    taus: torch.Tensor,
    beta: torch.Tensor,
    contacts: ContactLabels,
    skeleton: Skeleton,
) -> torch.Tensor:
    T = thetas.shape[0]
    if T < 2:
        raise InvalidArgumentError("foot energy needs at least two frames")
    if contacts.labels.shape != (T, len(skeleton.feet)):
        raise InvalidArgumentError(
            f"contact labels must be ({T}, {len(skeleton.feet)}), got {contacts.labels.shape}"
        )
    joints = forward_kinematics_t(thetas, taus, beta, skeleton)
    feet = joints[:, list(skeleton.feet), :]
    vel_sq = ((feet[1:] - feet[:-1]) ** 2).sum(dim=-1)
    c = as_tensor(contacts.labels[:-1])
    return (c * vel_sq).sum()


def _reproj_from_joints(joints, track, camera, huber_px):
    z = joints[..., 2]
    if bool((z <= 1e-6).any()):
        bad = torch.nonzero(z <= 1e-6)[0]
        raise BehindCameraError(frame=int(bad[0]), joint=int(bad[1]), depth=float(z[bad[0], bad[1]]))
    pix = project_t(joints, camera)
    residual = pix - as_tensor(track.positions)
    sq = (residual * residual).sum(dim=-1)
    return (as_tensor(track.confidences) * _huber_of_sqnorm(sq, huber_px)).sum()


def _smooth_from_joints(thetas, joints):
    dtheta = thetas[1:] - thetas[:-1]
    dx = joints[1:] - joints[:-1]
    return (dtheta * dtheta).sum() + (dx * dx).sum()


def _foot_from_joints(joints, contacts, skeleton):
    feet = joints[:, list(skeleton.feet), :]
    vel_sq = ((feet[1:] - feet[:-1]) ** 2).sum(dim=-1)
    return (as_tensor(contacts.labels[:-1]) * vel_sq).sum()


def local_terms_t(
    thetas: torch.Tensor,
    taus: torch.Tensor,
    beta: torch.Tensor,
    track: KeypointTrack,
    contacts: ContactLabels,
    camera: Camera,
    skeleton: Skeleton,
    config: LocalFitConfig,
) -> dict:
    """All Eq-1 terms as tensors, sharing one forward-kinematics pass."""
    if thetas.shape[0] < 2:
        raise InvalidArgumentError("local energy needs at least two frames")
    if contacts.labels.shape != (thetas.shape[0], len(skeleton.feet)):
        raise InvalidArgumentError("contact labels do not match motion length / feet count")
    joints = forward_kinematics_t(thetas, taus, beta, skeleton)
    terms = {
        "e_j": _reproj_from_joints(joints, track, camera, config.huber_px),
        "e_theta": e_pose_prior_t(thetas),
        "e_beta": e_shape_prior_t(beta),
        "e_smooth": _smooth_from_joints(thetas, joints),
        "e_foot": _foot_from_joints(joints, contacts, skeleton),
    }
    terms["total"] = (
        terms["e_j"]
        + config.lambda_theta * terms["e_theta"]
        + config.lambda_beta * terms["e_beta"]
        + config.lambda_smooth * terms["e_smooth"]
        + config.lambda_foot * terms["e_foot"]
    )
    return terms


def e_local_total_t(
    thetas: torch.Tensor,
    taus: torch.Tensor,
    beta: torch.Tensor,
    track: KeypointTrack,
    contacts: ContactLabels,
    camera: Camera,
    skeleton: Skeleton,
    config: LocalFitConfig,
) -> torch.Tensor:
    return local_terms_t(thetas, taus, beta, track, contacts, camera, skeleton, config)["total"]


def _motion_tensors(motion: MotionSequence):
    return as_tensor(motion.thetas), as_tensor(motion.taus), as_tensor(motion.beta)


def e_reproj(motion, track, camera, skeleton, huber_px: float = 1.0) -> float:
    return float(e_reproj_t(*_motion_tensors(motion), track, camera, skeleton, huber_px))


def e_pose_prior(motion) -> float:
    return float(e_pose_prior_t(as_tensor(motion.thetas)))


def e_shape_prior(shape_beta) -> float:
    return float(e_shape_prior_t(as_tensor(np.asarray(shape_beta, dtype=np.float64))))


def e_smooth(motion, skeleton) -> float:
    return float(e_smooth_t(*_motion_tensors(motion), skeleton))


def e_foot(motion, contacts, skeleton) -> float:
    return float(e_foot_t(*_motion_tensors(motion), contacts, skeleton))


def e_local_total(motion, track, contacts, camera, skeleton, config) -> float:
    return float(e_local_total_t(*_motion_tensors(motion), track, contacts, camera, skeleton, config))


def local_energy_terms(motion, track, contacts, camera, skeleton, config) -> dict:
    """Unweighted values of every Eq-1 term plus the weighted total."""
    thetas, taus, beta = _motion_tensors(motion)
    tensors = local_terms_t(thetas, taus, beta, track, contacts, camera, skeleton, config)
    return {k: float(v) for k, v in tensors.items()}


def fit_local(
    track: KeypointTrack,
    contacts: ContactLabels,
    camera: Camera,
    init: MotionSequence,
    config: LocalFitConfig,
    skeleton: Skeleton,
):
    """Minimize the local energy from `init`; returns (motion, trace).

    The trace lists one row per iteration; rows flagged accepted have
    non-increasing totals, and the returned motion is the best iterate seen
    (never worse than the initialization).
    """
    thetas = as_tensor(init.thetas.copy(), requires_grad=True)
    taus = as_tensor(init.taus.copy(), requires_grad=True)
    beta = as_tensor(init.beta.copy(), requires_grad=True)

    def evaluate() -> dict:
        return local_terms_t(thetas, taus, beta, track, contacts, camera, skeleton, config)

    def snapshot() -> MotionSequence:
        return MotionSequence(
            thetas=thetas.detach().numpy().copy(),
            taus=taus.detach().numpy().copy(),
            beta=beta.detach().numpy().copy(),
            fps=init.fps,
        )

    terms = evaluate()
    best_energy = float(terms["total"].detach())
    if not math.isfinite(best_energy):
        raise OptimizationFailureError("initial energy is non-finite", last_iterate=init)
    best = snapshot()

    stages = [
        [{"params": [taus], "lr": config.lr_pose}],
        [{"params": [taus, thetas], "lr": config.lr_pose}],
        [
            {"params": [taus, thetas], "lr": config.lr_pose},
            {"params": [beta], "lr": config.lr_shape},
        ],
    ]
    budgets = [max(1, int(round(f * config.iterations))) for f in config.stage_fractions]
    trace = []
    iteration = 0
    for stage_idx, (groups, budget) in enumerate(zip(stages, budgets)):
        opt = torch.optim.Adam(groups)
        scheduler = torch.optim.lr_scheduler.ExponentialLR(
            opt, gamma=config.lr_decay ** (1.0 / max(budget, 1))
        )
        prev = float(terms["total"].detach())
        for _ in range(budget):
            for p in (thetas, taus, beta):  # backward touches every leaf, not just the stage's
                p.grad = None
            terms["total"].backward()
            opt.step()
            scheduler.step()
            iteration += 1
            terms = evaluate()
            value = float(terms["total"].detach())
            if not math.isfinite(value):
                raise OptimizationFailureError(
                    f"energy diverged at iteration {iteration}", last_iterate=best
                )
            accepted = value <= best_energy
            if accepted:
                best_energy = value
                best = snapshot()
            row = {k: float(v.detach()) for k, v in terms.items()}
            row.update(iteration=iteration, stage=stage_idx, accepted=accepted)
            trace.append(row)
            if config.tol > 0 and (prev - value) / max(abs(prev), 1e-12) < config.tol:
                break
            prev = value
    return best, trace


def initial_motion_guess(
    track: KeypointTrack, camera: Camera, skeleton: Skeleton, fps: float = 30.0
) -> MotionSequence:
    """Rest-pose init; depth from the mean-bone pixel-length heuristic."""
    T = track.positions.shape[0]
    pairs = skeleton.bone_pairs()
    rest_len = np.linalg.norm(skeleton.offsets[pairs[:, 1]], axis=1)
    taus = np.zeros((T, 3))
    for t in range(T):
        kp = track.positions[t]
        conf = track.confidences[t]
        pix_len = np.linalg.norm(kp[pairs[:, 1]] - kp[pairs[:, 0]], axis=1)
        w = np.minimum(conf[pairs[:, 0]], conf[pairs[:, 1]])
        mask = (w > 0) & (pix_len > 1e-6)
        if mask.sum() >= 3:
            # pinhole: pixel_len ~ f * metric_len / z
            z = camera.fx * np.average(rest_len[mask], weights=w[mask]) / np.average(
                pix_len[mask], weights=w[mask]
            )
        else:
            z = 3.0
        z = float(np.clip(z, 0.5, 50.0))
        total_conf = conf.sum()
        if total_conf > 0:
            u = float(np.average(kp[:, 0], weights=conf))
            v = float(np.average(kp[:, 1], weights=conf))
        else:
            u, v = camera.cx, camera.cy
        taus[t] = [(u - camera.cx) * z / camera.fx, (v - camera.cy) * z / camera.fy, z]
    thetas = np.zeros((T, 69))
    return MotionSequence(thetas=thetas, taus=taus, fps=fps)


def detect_contacts(
    motion: MotionSequence,
    ground: "GroundPlane",
    skeleton: Skeleton,
    height_eps: float = 0.05,
    vel_eps: float = 0.02,
) -> ContactLabels:
    """Heuristic labels: near the plane and (nearly) stationary.

    The last frame reuses the previous frame's velocity since no forward
    difference exists there.
    """
    joints = motion_joints(motion, skeleton)
    feet = joints[:, list(skeleton.feet), :]
    signed = (feet - ground.point) @ ground.normal
    vel = np.linalg.norm(feet[1:] - feet[:-1], axis=-1)
    if len(vel) == 0:
        vel_full = np.zeros_like(signed)
    else:
        vel_full = np.concatenate([vel, vel[-1:]], axis=0)
    labels = ((signed < height_eps) & (vel_full < vel_eps)).astype(np.float64)
    return ContactLabels(labels=labels)

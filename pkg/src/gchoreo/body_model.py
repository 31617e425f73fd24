"""Simplified articulated body: axis-angle skeleton, pinhole camera, capsule limbs.

The body is joints-only: pose theta (23 axis-angle rotations, the first being
the global root orientation), root translation tau, and a 10-dim shape vector
beta that scales bone groups. Each non-root bone carries a capsule radius used
by the penetration energy and the intersection metric.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .errors import BehindCameraError, FormatError, InvalidArgumentError
from .numerics import DTYPE, as_tensor, rodrigues

NUM_BETAS = 10
POSE_DIM = 72  # [tau(3); theta(69)]
THETA_DIM = 69

SCALE_MIN = 0.2
SCALE_MAX = 3.0

SKELETON_VERSIONS = ("1",)


@dataclass(frozen=True)
class Skeleton:
    """Kinematic tree with rest offsets, capsule radii, and the beta scale map."""

    parents: tuple
    offsets: np.ndarray  # (J, 3) meters, child offset in parent frame at rest
    feet: tuple
    radii: np.ndarray  # (J,) capsule radius of the bone ending at joint j
    beta_map: np.ndarray  # (J, 10) per-bone scale sensitivity
    names: tuple = ()
    version: str = "1"

    def __post_init__(self):
        J = len(self.parents)
        if self.parents[0] != -1 or any(p < 0 for p in self.parents[1:]):
            raise InvalidArgumentError("joint 0 must be the unique root (parent -1)")
        if any(self.parents[j] >= j for j in range(1, J)):
            raise InvalidArgumentError("parents must be topologically ordered (parent < child)")
        if self.offsets.shape != (J, 3):
            raise InvalidArgumentError(f"offsets must be ({J}, 3)")
        if any(j < 0 or j >= J for j in self.feet):
            raise InvalidArgumentError("feet indices out of range")
        if np.any(self.radii[1:] <= 0):
            raise InvalidArgumentError("capsule radii must be positive")
        if self.beta_map.shape != (J, NUM_BETAS):
            raise InvalidArgumentError(f"beta_map must be ({J}, {NUM_BETAS})")

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    @property
    def num_bones(self) -> int:
        return len(self.parents) - 1

    def bone_pairs(self) -> np.ndarray:
        """(B, 2) array of (parent, child) joint indices, one row per bone."""
        return np.array([(self.parents[j], j) for j in range(1, self.num_joints)])


def default_skeleton_path() -> Path:
    return Path(resources.files("gchoreo").joinpath("assets/skeleton_v1.json"))


def skeleton_file_hash(path=None) -> str:
    path = Path(path) if path is not None else default_skeleton_path()
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_skeleton(path=None) -> Skeleton:
    """Load a skeleton definition JSON; rejects unknown versions."""
    path = Path(path) if path is not None else default_skeleton_path()
    data = json.loads(path.read_text())
    version = str(data.get("version"))
    if version not in SKELETON_VERSIONS:
        raise FormatError(f"unsupported skeleton version {version!r} in {path}")
    return Skeleton(
        parents=tuple(data["parents"]),
        offsets=np.asarray(data["offsets"], dtype=np.float64),
        feet=tuple(data["feet"]),
        radii=np.asarray(data["radii"], dtype=np.float64),
        beta_map=np.asarray(data["beta_map"], dtype=np.float64),
        names=tuple(data.get("names", ())),
        version=version,
    )


@dataclass
class Pose:
    theta: np.ndarray  # (69,) axis-angle, rotation 0 = root orientation
    tau: np.ndarray  # (3,) root translation, meters


@dataclass
class BodyShape:
    beta: np.ndarray = field(default_factory=lambda: np.zeros(NUM_BETAS))


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be positive")


@dataclass
class GroundPlane:
    """Plane through `point` with unit `normal`."""

    normal: np.ndarray
    point: np.ndarray

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.point = np.asarray(self.point, dtype=np.float64)
        if self.normal.shape != (3,) or self.point.shape != (3,):
            raise InvalidArgumentError("plane normal and point must be 3-vectors")
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise InvalidArgumentError("plane normal must have unit length")


@dataclass
class MotionSequence:
    """Per-dancer time series: thetas (T, 69), taus (T, 3), one beta (10,)."""

    thetas: np.ndarray
    taus: np.ndarray
    beta: np.ndarray = field(default_factory=lambda: np.zeros(NUM_BETAS))
    fps: float = 30.0

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=np.float64)
        self.taus = np.asarray(self.taus, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.thetas.ndim != 2 or self.thetas.shape[1] != THETA_DIM:
            raise InvalidArgumentError(f"thetas must be (T, {THETA_DIM})")
        if self.taus.shape != (self.thetas.shape[0], 3):
            raise InvalidArgumentError("taus must be (T, 3)")
        if self.beta.shape != (NUM_BETAS,):
            raise InvalidArgumentError(f"beta must be ({NUM_BETAS},)")
        if self.num_frames < 1:
            raise InvalidArgumentError("motion must have at least one frame")
        for name, arr in (("thetas", self.thetas), ("taus", self.taus), ("beta", self.beta)):
            if not np.isfinite(arr).all():
                raise InvalidArgumentError(f"{name} contains non-finite entries")

    @property
    def num_frames(self) -> int:
        return self.thetas.shape[0]

    def pose(self, t: int) -> Pose:
        return Pose(theta=self.thetas[t].copy(), tau=self.taus[t].copy())

    def packed(self) -> np.ndarray:
        """(T, 72) array of [tau; theta] rows."""
        return np.concatenate([self.taus, self.thetas], axis=1)

    @staticmethod
    def from_packed(y: np.ndarray, beta=None, fps: float = 30.0) -> "MotionSequence":
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 2 or y.shape[1] != POSE_DIM:
            raise InvalidArgumentError(f"packed motion must be (T, {POSE_DIM})")
        beta = np.zeros(NUM_BETAS) if beta is None else beta
        return MotionSequence(thetas=y[:, 3:], taus=y[:, :3], beta=beta, fps=fps)


def pack_pose(pose: Pose) -> np.ndarray:
    """Pose to the 72-vector [tau(3); theta(69)]."""
    if pose.tau.shape != (3,) or pose.theta.shape != (THETA_DIM,):
        raise InvalidArgumentError("pose has wrong dimensions")
    return np.concatenate([pose.tau, pose.theta])


def unpack_pose(y: np.ndarray) -> Pose:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (POSE_DIM,):
        raise InvalidArgumentError(f"packed pose must have {POSE_DIM} entries, got {y.shape}")
    return Pose(theta=y[3:].copy(), tau=y[:3].copy())


def bone_scales_t(beta: torch.Tensor, skeleton: Skeleton) -> torch.Tensor:
    """Per-joint bone scale from beta, clamped to [0.2, 3.0]. Differentiable."""
    bmap = as_tensor(skeleton.beta_map)
    return (1.0 + bmap @ beta).clamp(SCALE_MIN, SCALE_MAX)


def forward_kinematics_t(
    thetas: torch.Tensor, taus: torch.Tensor, beta: torch.Tensor, skeleton: Skeleton
) -> torch.Tensor:
    """Joint world positions (..., J, 3) from thetas (..., 69) and taus (..., 3).

    Root sits at tau; child j sits at parent + R_world(parent) @ (scale_j * offset_j)
    with R_world(j) = R_world(parent) @ R(theta_j).
    """
    J = skeleton.num_joints
    rots = rodrigues(thetas.reshape(*thetas.shape[:-1], J, 3))  # (..., J, 3, 3)
    offsets = as_tensor(skeleton.offsets)
    scales = bone_scales_t(beta, skeleton)

    world_rot = [rots[..., 0, :, :]]
    positions = [taus]
    for j in range(1, J):
        p = skeleton.parents[j]
        bone = scales[j] * offsets[j]
        pos = positions[p] + (world_rot[p] @ bone)
        world_rot.append(world_rot[p] @ rots[..., j, :, :])
        positions.append(pos)
    return torch.stack(positions, dim=-2)


def forward_kinematics(pose: Pose, shape: BodyShape, skeleton: Skeleton) -> np.ndarray:
    """3D joints (J, 3) for a single pose."""
    for name, arr in (("theta", pose.theta), ("tau", pose.tau), ("beta", shape.beta)):
        if not np.isfinite(arr).all():
            raise InvalidArgumentError(f"{name} contains non-finite entries")
    X = forward_kinematics_t(as_tensor(pose.theta), as_tensor(pose.tau), as_tensor(shape.beta), skeleton)
    return X.numpy()


def motion_joints(motion: MotionSequence, skeleton: Skeleton) -> np.ndarray:
    """3D joints (T, J, 3) for a whole motion sequence."""
    X = forward_kinematics_t(
        as_tensor(motion.thetas), as_tensor(motion.taus), as_tensor(motion.beta), skeleton
    )
    return X.numpy()


def project_t(X: torch.Tensor, camera: Camera) -> torch.Tensor:
    """Pinhole projection of (..., 3) points to (..., 2) pixels. No depth check."""
    z = X[..., 2]
    u = camera.fx * X[..., 0] / z + camera.cx
    v = camera.fy * X[..., 1] / z + camera.cy
    return torch.stack([u, v], dim=-1)


def project(X: np.ndarray, camera: Camera) -> np.ndarray:
    """Pinhole projection of joints (J, 3) or (T, J, 3); errors on z <= 1e-6."""
    X = np.asarray(X, dtype=np.float64)
    z = X[..., 2]
    if np.any(z <= 1e-6):
        bad = np.argwhere(z <= 1e-6)[0]
        frame, joint = (int(bad[0]), int(bad[1])) if z.ndim == 2 else (0, int(bad[0]))
        raise BehindCameraError(frame=frame, joint=joint, depth=float(z[tuple(bad)]))
    return project_t(as_tensor(X), camera).numpy()


def segment_clearance_t(
    a0: torch.Tensor,
    a1: torch.Tensor,
    ra: torch.Tensor,
    b0: torch.Tensor,
    b1: torch.Tensor,
    rb: torch.Tensor,
) -> torch.Tensor:
    """Signed capsule clearance, batched over leading dims.

    Closest-point parameters are clamped to the segments; near-parallel pairs
    fall back to the s=0 endpoint, which is the documented subgradient at the
    degeneracy. The distance sqrt is floored at 1e-18 so fully overlapping
    segments keep a finite gradient.
    """
    d1 = a1 - a0
    d2 = b1 - b0
    r = a0 - b0
    a = (d1 * d1).sum(-1)
    e = (d2 * d2).sum(-1)
    f = (d2 * r).sum(-1)
    c = (d1 * r).sum(-1)
    b = (d1 * d2).sum(-1)
    denom = a * e - b * b
    safe_denom = denom.clamp(min=1e-12)
    s = ((b * f - c * e) / safe_denom).clamp(0.0, 1.0)
    s = torch.where(denom > 1e-12, s, torch.zeros_like(s))
    t = (b * s + f) / e.clamp(min=1e-12)
    t_cl = t.clamp(0.0, 1.0)
    # re-optimize s when t was clamped to an endpoint
    s2 = ((b * t_cl - c) / a.clamp(min=1e-12)).clamp(0.0, 1.0)
    s = torch.where((t - t_cl).abs() > 0, s2, s)
    pa = a0 + s[..., None] * d1
    pb = b0 + t_cl[..., None] * d2
    dist = ((pa - pb) ** 2).sum(-1).clamp(min=1e-18).sqrt()
    return dist - (ra + rb)


def capsule_clearance(seg_a, radius_a: float, seg_b, radius_b: float) -> float:
    """Signed clearance between two capsules; negative means penetration.

    seg_a/seg_b are (2, 3) arrays of segment endpoints.
    """
    a = np.asarray(seg_a, dtype=np.float64)
    b = np.asarray(seg_b, dtype=np.float64)
    if a.shape != (2, 3) or b.shape != (2, 3):
        raise InvalidArgumentError("segments must be (2, 3) endpoint arrays")
    out = segment_clearance_t(
        as_tensor(a[0]), as_tensor(a[1]), as_tensor(float(radius_a)),
        as_tensor(b[0]), as_tensor(b[1]), as_tensor(float(radius_b)),
    )
    return float(out)


def bone_segments_t(joints: torch.Tensor, skeleton: Skeleton):
    """Per-bone segment endpoints and radii from joints (..., J, 3).

    Returns (p0, p1, radii) with p0/p1 of shape (..., B, 3) and radii (B,).
    """
    pairs = skeleton.bone_pairs()
    p0 = joints[..., pairs[:, 0], :]
    p1 = joints[..., pairs[:, 1], :]
    radii = as_tensor(skeleton.radii[pairs[:, 1]])
    return p0, p1, radii

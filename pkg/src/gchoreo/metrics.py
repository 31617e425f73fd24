"""Motion quality metrics: intersection frequency, diversity, beat alignment,
and a Frechet distance over hand-crafted kinetic features.

TIF, GenDiv, and MMC are documented variants (the report labels them as such):
TIF counts frames with any inter-dancer capsule penetration, GenDiv is the mean
pairwise distance between kinetic feature vectors, and MMC scores music beats
against kinematic beats (local minima of mean joint speed) with a Gaussian
window. The Frechet metric replaces a learned feature extractor with per-joint
speed/acceleration statistics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .body_model import Skeleton, bone_segments_t, motion_joints, segment_clearance_t
from .errors import InvalidArgumentError, UndefinedMetricError
from .features import MusicFeatures
from .numerics import as_tensor

VARIANT_LABELS = {
    "tif": "documented variant: fraction of frames with any inter-dancer capsule penetration",
    "gendiv": "documented variant: mean pairwise distance of kinetic feature vectors",
    "mmc": "documented variant: Gaussian beat alignment of kinematic vs music beats",
    "fid_kinetic": "documented variant: Frechet distance over kinetic feature statistics",
}

KINEMATIC_BEAT_PERCENTILE = 25.0
KINEMATIC_BEAT_MIN_SEP_S = 0.2


@dataclass
class MetricsReport:
    tif: float | None = None
    gendiv: float | None = None
    mmc: float | None = None
    fid_kinetic: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tif is not None and not (0.0 <= self.tif <= 1.0):
            raise InvalidArgumentError("tif must lie in [0, 1]")
        if self.gendiv is not None and self.gendiv < 0:
            raise InvalidArgumentError("gendiv must be non-negative")
        if self.mmc is not None and not (0.0 <= self.mmc <= 1.0):
            raise InvalidArgumentError("mmc must lie in [0, 1]")
        if self.fid_kinetic is not None and self.fid_kinetic < -1e-9:
            raise InvalidArgumentError("fid must be non-negative")

    def to_json(self) -> str:
        payload = {
            "tif": self.tif,
            "gendiv": self.gendiv,
            "mmc": self.mmc,
            "fid_kinetic": self.fid_kinetic,
            "metadata": self.metadata,
            "variants": VARIANT_LABELS,
        }
        return json.dumps(payload, sort_keys=True, indent=1)


def penetration_frames(motions, skeleton: Skeleton) -> np.ndarray:
    """Boolean mask (T,) of frames where any dancer pair has capsule overlap."""
    joints = [as_tensor(motion_joints(m, skeleton)) for m in motions]
    T = joints[0].shape[0]
    hit = np.zeros(T, dtype=bool)
    segs = [bone_segments_t(j, skeleton) for j in joints]
    for p in range(len(motions)):
        for q in range(p + 1, len(motions)):
            a0, a1, ra = segs[p]
            b0, b1, rb = segs[q]
            clear = segment_clearance_t(
                a0[:, :, None, :], a1[:, :, None, :], ra[:, None],
                b0[:, None, :, :], b1[:, None, :, :], rb[None, :],
            )
            hit |= (clear < 0).any(dim=-1).any(dim=-1).numpy()
    return hit


def tif(motions, skeleton: Skeleton) -> float:
    """Fraction of frames with at least one penetrating inter-dancer capsule pair."""
    if len(motions) < 2:
        raise InvalidArgumentError("tif needs at least two dancers")
    hit = penetration_frames(motions, skeleton)
    return float(hit.sum() / len(hit))


def kinetic_features(motion, skeleton: Skeleton) -> np.ndarray:
    """Per-joint (mean speed, speed variance, mean acceleration magnitude), 3J dims."""
    joints = motion_joints(motion, skeleton)
    if joints.shape[0] < 3:
        raise InvalidArgumentError("kinetic features need at least three frames")
    vel = (joints[1:] - joints[:-1]) * motion.fps  # (T-1, J, 3) m/s
    speed = np.linalg.norm(vel, axis=-1)  # (T-1, J)
    acc = np.linalg.norm((vel[1:] - vel[:-1]) * motion.fps, axis=-1)  # (T-2, J)
    return np.concatenate([speed.mean(axis=0), speed.var(axis=0), acc.mean(axis=0)])


def pairwise_diversity(features: np.ndarray) -> float:
    """Mean pairwise Euclidean distance between feature rows."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < 2:
        raise InvalidArgumentError("diversity needs at least two items")
    total = 0.0
    count = 0
    for i in range(n):
        for j in range(i + 1, n):
            total += float(np.linalg.norm(features[i] - features[j]))
            count += 1
    return total / count


def gendiv(motions, skeleton: Skeleton) -> float:
    if len(motions) < 2:
        raise InvalidArgumentError("gendiv needs at least two motions")
    feats = np.stack([kinetic_features(m, skeleton) for m in motions])
    return pairwise_diversity(feats)


def kinematic_beats(motion, skeleton: Skeleton) -> np.ndarray:
    """Beat times (seconds): strict local minima of mean joint speed below the
    25th percentile, at least 0.2 s apart."""
    joints = motion_joints(motion, skeleton)
    speed = np.linalg.norm(joints[1:] - joints[:-1], axis=-1).mean(axis=1)  # (T-1,)
    if len(speed) < 3:
        return np.zeros(0)
    threshold = np.percentile(speed, KINEMATIC_BEAT_PERCENTILE)
    minima = [
        k
        for k in range(1, len(speed) - 1)
        if speed[k] < speed[k - 1] and speed[k] < speed[k + 1] and speed[k] < threshold
    ]
    min_sep = KINEMATIC_BEAT_MIN_SEP_S * motion.fps
    kept = []
    for k in minima:
        if not kept or k - kept[-1] >= min_sep:
            kept.append(k)
    # speed sample k spans frames k..k+1; assign its midpoint time
    return (np.array(kept, dtype=np.float64) + 0.5) / motion.fps


def mmc(motion, features: MusicFeatures, sigma: float, skeleton: Skeleton) -> float:
    """Mean over music beats of exp(-min_k (t_k - b)^2 / (2 sigma^2)).

    Returns 0 by convention when the motion has no kinematic beats.
    """
    if sigma <= 0:
        raise InvalidArgumentError("sigma must be positive")
    beat_frames = features.beat_frames()
    if beat_frames.size == 0:
        raise UndefinedMetricError("features contain no music beats")
    music_beats = beat_frames / features.fps
    motion_beats = kinematic_beats(motion, skeleton)
    if motion_beats.size == 0:
        return 0.0
    scores = [
        float(np.exp(-np.min((motion_beats - b) ** 2) / (2.0 * sigma * sigma)))
        for b in music_beats
    ]
    return float(np.mean(scores))


def _sym_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; negatives clamp to 0."""
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}) via the symmetric route
    sqrt(Sa^{1/2} Sb Sa^{1/2})."""
    mu_a = np.asarray(mu_a, dtype=np.float64)
    mu_b = np.asarray(mu_b, dtype=np.float64)
    cov_a = np.asarray(cov_a, dtype=np.float64)
    cov_b = np.asarray(cov_b, dtype=np.float64)
    root_a = _sym_sqrt(cov_a)
    cross = _sym_sqrt(root_a @ cov_b @ root_a)
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a + cov_b - 2.0 * cross))
    return max(value, 0.0)


def _gaussian_stats(features: np.ndarray):
    n, dim = features.shape
    mu = features.mean(axis=0)
    centered = features - mu
    cov = centered.T @ centered / max(n - 1, 1)
    if n < dim + 1:
        cov = cov + 1e-6 * np.eye(dim)
    return mu, cov


def fid_kinetic(motions_a, motions_b, skeleton: Skeleton) -> float:
    """Frechet distance between the kinetic-feature Gaussians of two motion sets."""
    if len(motions_a) == 0 or len(motions_b) == 0:
        raise InvalidArgumentError("fid needs non-empty motion sets")
    fa = np.stack([kinetic_features(m, skeleton) for m in motions_a])
    fb = np.stack([kinetic_features(m, skeleton) for m in motions_b])
    return frechet_gaussian(*_gaussian_stats(fa), *_gaussian_stats(fb))


def evaluate_groups(
    generated_groups,
    reference_groups,
    skeleton: Skeleton,
    features: MusicFeatures | None = None,
    sigma: float = 0.1,
) -> MetricsReport:
    """Metrics over sets of group motions (each group = list of MotionSequence)."""
    gen_flat = [m for group in generated_groups for m in group]
    ref_flat = [m for group in reference_groups for m in group]
    tif_values = [tif(group, skeleton) for group in generated_groups if len(group) >= 2]
    report = MetricsReport(
        tif=float(np.mean(tif_values)) if tif_values else None,
        gendiv=gendiv(gen_flat, skeleton) if len(gen_flat) >= 2 else None,
        mmc=(
            float(np.mean([mmc(m, features, sigma, skeleton) for m in gen_flat]))
            if features is not None and len(gen_flat) > 0
            else None
        ),
        fid_kinetic=fid_kinetic(gen_flat, ref_flat, skeleton) if gen_flat and ref_flat else None,
        metadata={
            "generated_groups": len(generated_groups),
            "generated_motions": len(gen_flat),
            "reference_motions": len(ref_flat),
            "sigma_seconds": sigma,
        },
    )
    return report

"""Finite-difference verification suite for every energy and the generator.

Each entry builds a randomized toy problem, wraps the objective as a
DifferentiableFunction over a flat parameter vector, and compares the analytic
gradient against central differences. Energies must stay below 1e-4 relative
error, the full generator below 1e-3.
"""

from __future__ import annotations

import numpy as np
import torch

from .body_model import Camera, Skeleton, forward_kinematics_t, project_t
from .features import SynthSpec, synth_scenario
from .generator import GeneratorConfig, sequence_loss, init_params
from .global_fit import (
    DepthAnnotation,
    GlobalFitConfig,
    GroundPlane,
    e_dep_t,
    e_gc_t,
    e_pen_t,
    e_reg_t,
    plane_objective_t,
)
from .local_fit import ContactLabels, KeypointTrack, LocalFitConfig, local_terms_t
from .numerics import DifferentiableFunction, as_tensor, from_torch, grad_check

ENERGY_TOL = 1e-4
GENERATOR_TOL = 1e-3


def toy_skeleton(seed: int = 0) -> Skeleton:
    """Tiny 4-joint chain with feet, for fast randomized gradient toys."""
    rng = np.random.default_rng(seed)
    offsets = np.array(
        [[0.0, 0.0, 0.0], [0.1, 0.3, 0.0], [-0.1, 0.3, 0.05], [0.05, 0.25, -0.05]]
    )
    beta_map = np.zeros((4, 10))
    beta_map[:, 0] = 0.1
    beta_map[1:, 1] = 0.05
    return Skeleton(
        parents=(-1, 0, 1, 1),
        offsets=offsets + rng.normal(0, 0.01, size=(4, 3)),
        feet=(2, 3),
        radii=np.array([0.0, 0.05, 0.04, 0.04]),
        beta_map=beta_map,
        names=("root", "mid", "foot_a", "foot_b"),
        version="1",
    )


def _split_motion(x: torch.Tensor, T: int, J: int):
    n_theta = T * 3 * J
    thetas = x[:n_theta].reshape(T, 3 * J)
    taus = x[n_theta : n_theta + 3 * T].reshape(T, 3)
    beta = x[n_theta + 3 * T :]
    return thetas, taus, beta


def _random_motion_vec(rng, T, J):
    thetas = rng.normal(0, 0.2, size=T * 3 * J)
    taus = (np.array([0.0, 0.0, 4.0]) + rng.normal(0, 0.1, size=(T, 3))).reshape(-1)
    beta = rng.normal(0, 0.3, size=10)
    return np.concatenate([thetas, taus, beta])


def _toy_problem(seed: int, T: int = 3):
    rng = np.random.default_rng(seed)
    skeleton = toy_skeleton(seed)
    J = skeleton.num_joints
    camera = Camera(800.0, 800.0, 400.0, 400.0)
    x0 = _random_motion_vec(rng, T, J)
    thetas, taus, beta = _split_motion(as_tensor(x0), T, J)
    joints = forward_kinematics_t(thetas, taus, beta, skeleton)
    pix = project_t(joints, camera).numpy() + rng.normal(0, 2.0, size=(T, J, 2))
    track = KeypointTrack(positions=pix, confidences=rng.uniform(0.2, 1.0, size=(T, J)))
    contacts = ContactLabels(labels=rng.integers(0, 2, size=(T, 2)))
    config = LocalFitConfig(huber_px=1.0)
    return skeleton, camera, track, contacts, config, x0, T, J


def local_energy_fn(term: str, seed: int) -> tuple:
    """(DifferentiableFunction, x0) pair for one local-energy term."""
    skeleton, camera, track, contacts, config, x0, T, J = _toy_problem(seed)

    def fn(x: torch.Tensor) -> torch.Tensor:
        thetas, taus, beta = _split_motion(x, T, J)
        return local_terms_t(thetas, taus, beta, track, contacts, camera, skeleton, config)[term]

    return from_torch(fn, dim=x0.size, name=f"local.{term}"), x0


def global_energy_fn(term: str, seed: int) -> tuple:
    """(DifferentiableFunction, x0) for one global term over two toy dancers."""
    rng = np.random.default_rng(seed + 1000)
    skeleton = toy_skeleton(seed)
    J = skeleton.num_joints
    T = 3
    x0a = _random_motion_vec(rng, T, J)
    x0b = _random_motion_vec(rng, T, J)
    # keep the pair close so penetration toys actually overlap
    x0b[T * 3 * J : T * 3 * J + 3 * T] = x0a[T * 3 * J : T * 3 * J + 3 * T] + rng.normal(
        0, 0.05, size=3 * T
    )
    anchor = as_tensor(rng.normal(0, 0.2, size=(T, 3 * J)))
    contacts = ContactLabels(labels=rng.integers(0, 2, size=(T, 2)))
    plane = GroundPlane(normal=np.array([0.0, -1.0, 0.0]), point=np.array([0.0, 0.6, 4.0]))
    annotation = DepthAnnotation(
        items=np.array([[t, 0, 1, r] for t, r in zip(range(T), (1, -1, 0))], dtype=np.int64)
    )
    x0 = np.concatenate([x0a, x0b])
    half = x0a.size

    def fn(x: torch.Tensor) -> torch.Tensor:
        tha, taa, bea = _split_motion(x[:half], T, J)
        thb, tab, beb = _split_motion(x[half:], T, J)
        if term == "e_pen":
            return e_pen_t([tha, thb], [taa, tab], [bea, beb], skeleton)
        if term == "e_reg":
            return e_reg_t(tha, anchor) + e_reg_t(thb, anchor)
        if term == "e_dep":
            return e_dep_t([taa, tab], annotation)
        if term == "e_gc":
            return e_gc_t(tha, taa, bea, contacts, plane, skeleton) + e_gc_t(
                thb, tab, beb, contacts, plane, skeleton
            )
        raise ValueError(term)

    return from_torch(fn, dim=x0.size, name=f"global.{term}"), x0


def plane_objective_fn(seed: int) -> tuple:
    rng = np.random.default_rng(seed + 2000)
    points = as_tensor(rng.normal(0, 1.0, size=(40, 3)) * np.array([1.0, 1.0, 0.05]))
    f = as_tensor(rng.normal(0, 0.1, size=3))

    def fn(n: torch.Tensor) -> torch.Tensor:
        return plane_objective_t(n, points, f, delta=0.05, penalty=10.0)

    x0 = np.array([0.05, 0.1, 1.0]) + rng.normal(0, 0.05, size=3)
    return from_torch(fn, dim=3, name="plane.objective"), x0


def generator_loss_fn(seed: int) -> tuple:
    """Full-model training loss as a function of the flattened parameters."""
    cfg = GeneratorConfig(
        audio_dim=3,
        d_model=4,
        encoder_layers=1,
        encoder_heads=1,
        group_layers=2,
        attn_heads=1,
        head_dim=4,
        mlp_hidden=4,
        mlp_layers=1,
        window=3,
    )
    model = init_params(cfg, seed=seed)
    rng = np.random.default_rng(seed + 3000)
    T, N = 3, 2
    feats = as_tensor(rng.normal(size=(T, cfg.audio_dim)))
    gt = as_tensor(rng.normal(0, 0.5, size=(N, T, 72)))
    names = [name for name, _ in model.named_parameters()]
    shapes = {name: p.shape for name, p in model.named_parameters()}
    sizes = {name: p.numel() for name, p in model.named_parameters()}
    x0 = np.concatenate(
        [model.state_dict()[n].detach().numpy().reshape(-1) for n in names]
    )

    loss_module = _GeneratorLossModule(model)

    def fn(x: torch.Tensor) -> torch.Tensor:
        params = {}
        offset = 0
        for n in names:
            params["model." + n] = x[offset : offset + sizes[n]].reshape(shapes[n])
            offset += sizes[n]
        return torch.func.functional_call(loss_module, params, (feats, gt, gt[:, 0, :3]))

    return from_torch(fn, dim=x0.size, name="generator.loss"), x0


class _GeneratorLossModule(torch.nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward(self, feats, gt, taus0):
        return sequence_loss(self.model, feats, gt, taus0, teacher_forcing=1.0)


LOCAL_TERMS = ("e_j", "e_theta", "e_beta", "e_smooth", "e_foot", "total")
GLOBAL_TERMS = ("e_pen", "e_reg", "e_dep", "e_gc")


def run_suite(suite: str = "all", seeds=(0, 1, 2), step: float = 1e-5):
    """Run gradient checks; yields (name, seed, tolerance, report)."""
    results = []
    if suite in ("all", "energies"):
        for term in LOCAL_TERMS:
            for seed in seeds:
                f, x0 = local_energy_fn(term, seed)
                results.append((f.name, seed, ENERGY_TOL, grad_check(f, x0, step)))
        for term in GLOBAL_TERMS:
            for seed in seeds:
                f, x0 = global_energy_fn(term, seed)
                results.append((f.name, seed, ENERGY_TOL, grad_check(f, x0, step)))
        for seed in seeds:
            f, x0 = plane_objective_fn(seed)
            results.append((f.name, seed, ENERGY_TOL, grad_check(f, x0, step)))
    if suite in ("all", "generator"):
        for seed in seeds[:2]:
            f, x0 = generator_loss_fn(seed)
            results.append((f.name, seed, GENERATOR_TOL, grad_check(f, x0, step)))
    if not results:
        raise ValueError(f"unknown gradcheck suite {suite!r}")
    return results

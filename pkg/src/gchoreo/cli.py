"""Command-line pipeline: synth, fit-local, fit-global, train, generate, eval,
gradcheck, features.

Exit codes: 0 success, 1 validation/format error, 2 runtime failure. Every
run writes its outputs atomically plus a manifest.json recording arguments,
input/output hashes, seed, versions, and wall time.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .body_model import MotionSequence
from .checks import run_suite
from .errors import (
    ConfigError,
    DegenerateGeometryError,
    FormatError,
    GChoreoError,
    InvalidArgumentError,
    OptimizationFailureError,
    TrainingFailureError,
    UndefinedMetricError,
)
from .features import MusicFeatures, SynthSpec, extract_features, load_features, save_features, synth_scenario
from .generator import generate as generate_motion
from .generator import train as train_model
from .global_fit import fit_global
from .io import (
    RunConfig,
    atomic_write_text,
    load_checkpoint,
    load_run_config,
    load_scenario,
    read_motion,
    save_checkpoint,
    save_scenario,
    sha256_file,
    write_csv,
    write_manifest,
    write_motion,
)
from .local_fit import fit_local, initial_motion_guess
from .metrics import evaluate_groups


def _apply_thread_cap(config: RunConfig) -> None:
    env = os.environ.get("GCHOREO_THREADS")
    threads = int(env) if env else config.threads
    if threads and threads > 0:
        torch.set_num_threads(threads)


def _load_group_motions(path: Path):
    """One group per .gmc file; a directory means a set of groups."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.gmc"))
        if not files:
            raise InvalidArgumentError(f"no .gmc files in {path}")
        return [read_motion(f) for f in files]
    return [read_motion(path)]


def cmd_synth(args) -> int:
    start = time.time()
    spec = SynthSpec(
        pattern=args.pattern,
        n_dancers=args.n,
        n_frames=args.t,
        noise_px=args.noise,
        seed=args.seed,
    )
    scenario = synth_scenario(spec)
    out = Path(args.out)
    save_scenario(scenario, out)
    outputs = [out / "scenario.json", out / "motion.gmc", out / "features.gmf"]
    write_manifest(
        out, "synth", vars(args), inputs=[], outputs=outputs, seed=args.seed,
        wall_time_s=time.time() - start,
    )
    return 0


def cmd_fit_local(args) -> int:
    start = time.time()
    config = load_run_config(args.config)
    _apply_thread_cap(config)
    bundle = load_scenario(args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    fitted = []
    outputs = []
    for i, (track, contacts) in enumerate(zip(bundle.tracks, bundle.contacts)):
        init = initial_motion_guess(track, bundle.camera, bundle.skeleton)
        motion, trace = fit_local(
            track, contacts, bundle.camera, init, config.local_fit, bundle.skeleton
        )
        fitted.append(motion)
        trace_path = out / f"trace_local_{i}.csv"
        write_csv(
            trace_path,
            ["iteration", "e_j", "e_theta", "e_beta", "e_smooth", "e_foot", "total", "accepted"],
            [
                [r["iteration"], r["e_j"], r["e_theta"], r["e_beta"], r["e_smooth"],
                 r["e_foot"], r["total"], int(r["accepted"])]
                for r in trace
            ],
        )
        outputs.append(trace_path)
    motion_path = out / "motion_local.gmc"
    write_motion(fitted, motion_path)
    outputs.append(motion_path)
    scenario_path = Path(args.scenario)
    if scenario_path.is_dir():
        scenario_path = scenario_path / "scenario.json"
    inputs = [scenario_path] + ([Path(args.config)] if args.config else [])
    write_manifest(out, "fit-local", vars(args), inputs=inputs, outputs=outputs,
                   seed=config.seed, wall_time_s=time.time() - start)
    return 0


def cmd_fit_global(args) -> int:
    start = time.time()
    config = load_run_config(args.config)
    _apply_thread_cap(config)
    bundle = load_scenario(args.scenario)
    local_motions = read_motion(args.local)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    refined, plane, trace = fit_global(
        local_motions,
        bundle.tracks,
        bundle.contacts,
        bundle.camera,
        bundle.annotation,
        bundle.skeleton,
        config.global_fit,
    )
    motion_path = out / "motion_global.gmc"
    write_motion(refined, motion_path)
    trace_path = out / "trace_global.csv"
    write_csv(
        trace_path,
        ["iteration", "e_j", "e_pen", "e_reg", "e_dep", "e_gc", "total", "accepted"],
        [
            [r["iteration"], r["e_j"], r["e_pen"], r["e_reg"], r["e_dep"], r["e_gc"],
             r["total"], int(r["accepted"])]
            for r in trace
        ],
    )
    result_path = out / "result.json"
    atomic_write_text(
        result_path,
        json.dumps(
            {
                "plane": {"normal": plane.normal.tolist(), "point": plane.point.tolist()},
                "final_energy": trace[-1]["total"] if trace else None,
            },
            sort_keys=True,
            indent=1,
        )
        + "\n",
    )
    scenario_path = Path(args.scenario)
    if scenario_path.is_dir():
        scenario_path = scenario_path / "scenario.json"
    inputs = [scenario_path, Path(args.local)] + ([Path(args.config)] if args.config else [])
    write_manifest(out, "fit-global", vars(args), inputs=inputs,
                   outputs=[motion_path, trace_path, result_path],
                   seed=config.seed, wall_time_s=time.time() - start)
    return 0


def cmd_train(args) -> int:
    start = time.time()
    config = load_run_config(args.config)
    _apply_thread_cap(config)
    data_dir = Path(args.data_dir)
    stems = sorted(p.stem for p in data_dir.glob("*.gmf"))
    dataset = []
    inputs = [] if args.config is None else [Path(args.config)]
    for stem in stems:
        fpath = data_dir / f"{stem}.gmf"
        mpath = data_dir / f"{stem}.gmc"
        if not mpath.exists():
            raise InvalidArgumentError(f"feature file {fpath} has no matching {mpath.name}")
        dataset.append((load_features(fpath), read_motion(mpath)))
        inputs += [fpath, mpath]
    if not dataset:
        raise InvalidArgumentError(f"no .gmf/.gmc pairs found in {data_dir}")

    model, trace = train_model(dataset, config.train, config.generator)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.gmp"
    save_checkpoint(model, model_path)
    loss_path = out / "loss.csv"
    write_csv(loss_path, ["step", "loss"], [[i, v] for i, v in enumerate(trace)])
    write_manifest(out, "train", vars(args), inputs=inputs,
                   outputs=[model_path, loss_path], seed=config.train.seed,
                   wall_time_s=time.time() - start)
    return 0


def cmd_generate(args) -> int:
    start = time.time()
    config = load_run_config(args.config)
    _apply_thread_cap(config)
    model = load_checkpoint(args.model)
    features = load_features(args.features)
    positions = np.asarray(json.loads(Path(args.positions).read_text()), dtype=np.float64)
    motions = generate_motion(features, positions, model, fps=features.fps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    motion_path = out / "motion_generated.gmc"
    write_motion(motions, motion_path)
    write_manifest(out, "generate", vars(args),
                   inputs=[Path(args.model), Path(args.features), Path(args.positions)],
                   outputs=[motion_path], seed=None, wall_time_s=time.time() - start)
    return 0


def cmd_eval(args) -> int:
    start = time.time()
    config = load_run_config(args.config)
    _apply_thread_cap(config)
    from .body_model import load_skeleton

    skeleton = load_skeleton()
    generated = _load_group_motions(Path(args.generated))
    reference = _load_group_motions(Path(args.reference))
    features = load_features(args.features) if args.features else None
    report = evaluate_groups(
        generated, reference, skeleton, features=features, sigma=config.metrics.sigma_seconds
    )
    out = Path(args.out)
    atomic_write_text(out, report.to_json() + "\n")
    inputs = [Path(args.generated), Path(args.reference)]
    inputs = [p for p in inputs if p.is_file()] + (
        [Path(args.features)] if args.features else []
    )
    write_manifest(out.with_suffix(".manifest.json"), "eval", vars(args), inputs=inputs,
                   outputs=[out], seed=None, wall_time_s=time.time() - start)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.suite, seeds=tuple(range(args.seeds)))
    failed = 0
    for name, seed, tol, report in results:
        ok = report.max_rel_error < tol
        failed += 0 if ok else 1
        print(
            f"{'PASS' if ok else 'FAIL'} {name} seed={seed} "
            f"max_rel_error={report.max_rel_error:.3e} tol={tol:g}"
        )
    if failed:
        print(f"{failed} gradient checks failed", file=sys.stderr)
        return 2
    return 0


def cmd_features(args) -> int:
    start = time.time()
    import wave

    with wave.open(args.wav, "rb") as wav:
        sample_rate = wav.getframerate()
        n_channels = wav.getnchannels()
        width = wav.getsampwidth()
        frames = wav.readframes(wav.getnframes())
    if width != 2:
        raise InvalidArgumentError(f"expected 16-bit PCM WAV, got sample width {width}")
    pcm = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    if n_channels > 1:
        pcm = pcm.reshape(-1, n_channels)[:, 0]
    features = extract_features(pcm, sample_rate)
    save_features(features, args.out)
    write_manifest(Path(args.out).with_suffix(".manifest.json"), "features", vars(args),
                   inputs=[Path(args.wav)], outputs=[Path(args.out)], seed=None,
                   wall_time_s=time.time() - start)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gchoreo", description=__doc__)
    parser.add_argument("--version", action="version", version=f"gchoreo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scenario")
    p.add_argument("--pattern", required=True)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--t", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-local", help="fit each dancer independently")
    p.add_argument("--scenario", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_local)

    p = sub.add_parser("fit-global", help="jointly refine all dancers")
    p.add_argument("--scenario", required=True)
    p.add_argument("--local", required=True, help="motion container from fit-local")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_global)

    p = sub.add_parser("train", help="train the group-dance generator")
    p.add_argument("--data-dir", required=True, help="directory of <stem>.gmf/.gmc pairs")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="autoregressively generate group motion")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--positions", required=True, help="JSON file with N x 3 start positions")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="compute metrics for generated motion")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--suite", default="all", choices=["all", "energies", "generator"])
    p.add_argument("--seeds", type=int, default=2)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("features", help="extract music features from a WAV file")
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidArgumentError, FormatError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OptimizationFailureError, TrainingFailureError, DegenerateGeometryError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except GChoreoError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

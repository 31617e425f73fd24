"""File formats, run configuration, and manifests.

Binary containers carry bulk arrays (motion f32, checkpoints f64) with
little-endian layout and a trailing CRC32 of everything before it; JSON carries
human-edited inputs. All writes are atomic (temp file + rename) and all formats
round-trip byte-exactly so manifest-driven re-runs reproduce outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import sys
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .body_model import (
    Camera,
    GroundPlane,
    MotionSequence,
    Skeleton,
    default_skeleton_path,
    load_skeleton,
    skeleton_file_hash,
)
from .errors import ConfigError, CorruptionError, FormatError, InvalidArgumentError
from .features import MusicFeatures, SynthSpec, SyntheticScenario, load_features, save_features
from .generator import GDanceR, GeneratorConfig, TrainConfig, init_params
from .global_fit import DepthAnnotation, GlobalFitConfig
from .local_fit import ContactLabels, KeypointTrack, LocalFitConfig


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# motion container: magic GMC1, version u32, dancers u32, frames u32,
# per dancer beta (10 f32) + frames x 72 f32 poses, trailing CRC32.

MOTION_MAGIC = b"GMC1"
MOTION_VERSION = 1


def write_motion(motions, path) -> None:
    if not motions:
        raise InvalidArgumentError("cannot write an empty group motion")
    frames = motions[0].num_frames
    if any(m.num_frames != frames for m in motions):
        raise InvalidArgumentError("all dancers must have the same frame count")
    body = bytearray()
    body += MOTION_MAGIC
    body += struct.pack("<III", MOTION_VERSION, len(motions), frames)
    for m in motions:
        body += np.asarray(m.beta, dtype="<f4").tobytes()
        body += np.ascontiguousarray(m.packed(), dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    atomic_write_bytes(Path(path), bytes(body))


def read_motion(path, fps: float = 30.0):
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise CorruptionError("motion container truncated", offset=len(raw))
    if raw[:4] != MOTION_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MOTION_MAGIC!r}", offset=0)
    version, n_dancers, frames = struct.unpack_from("<III", raw, 4)
    if version != MOTION_VERSION:
        raise FormatError(
            f"unsupported motion container version {version}; this build reads version {MOTION_VERSION}",
            offset=4,
        )
    per_dancer = 10 * 4 + frames * 72 * 4
    expected = 16 + n_dancers * per_dancer + 4
    if len(raw) != expected:
        raise CorruptionError(
            f"container declares {n_dancers} dancers x {frames} frames "
            f"({expected} bytes) but file has {len(raw)} bytes",
            offset=len(raw),
        )
    (stored_crc,) = struct.unpack_from("<I", raw, expected - 4)
    if stored_crc != zlib.crc32(raw[: expected - 4]):
        raise CorruptionError("motion payload CRC mismatch", offset=expected - 4)
    motions = []
    offset = 16
    for _ in range(n_dancers):
        beta = np.frombuffer(raw, dtype="<f4", count=10, offset=offset).astype(np.float64)
        offset += 40
        packed = (
            np.frombuffer(raw, dtype="<f4", count=frames * 72, offset=offset)
            .astype(np.float64)
            .reshape(frames, 72)
        )
        offset += frames * 72 * 4
        motions.append(MotionSequence.from_packed(packed, beta=beta, fps=fps))
    return motions


# ---------------------------------------------------------------------------
# model checkpoint: magic GMP1, version u32, header-length u32, JSON header
# (config echo + tensor table), f64 payload, trailing CRC32.

CHECKPOINT_MAGIC = b"GMP1"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: GDanceR, path) -> None:
    state = model.state_dict()
    table = []
    payload = bytearray()
    for name in sorted(state):
        tensor = state[name].detach().to(torch.float64).contiguous()
        table.append([name, list(tensor.shape), len(payload)])
        payload += tensor.numpy().astype("<f8").tobytes()
    header = json.dumps(
        {"config": dataclasses.asdict(model.cfg), "tensors": table}, sort_keys=True
    ).encode("utf-8")
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<II", CHECKPOINT_VERSION, len(header))
    body += header
    body += payload
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    atomic_write_bytes(Path(path), bytes(body))


def load_checkpoint(path) -> GDanceR:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise CorruptionError("checkpoint truncated", offset=len(raw))
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    header_end = 12 + header_len
    (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if stored_crc != zlib.crc32(raw[:-4]):
        raise CorruptionError("checkpoint CRC mismatch", offset=len(raw) - 4)
    header = json.loads(raw[12:header_end].decode("utf-8"))
    cfg = GeneratorConfig(**header["config"])
    model = init_params(cfg, seed=0)
    expected_shapes = {name: list(t.shape) for name, t in model.state_dict().items()}
    state = {}
    for name, shape, offset in header["tensors"]:
        if name not in expected_shapes:
            raise FormatError(f"checkpoint tensor {name!r} unknown to this architecture")
        if shape != expected_shapes[name]:
            raise FormatError(
                f"checkpoint tensor {name!r} has shape {shape}, config implies {expected_shapes[name]}"
            )
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=header_end + offset)
        state[name] = torch.from_numpy(arr.copy().reshape(shape))
    missing = set(expected_shapes) - set(state)
    if missing:
        raise FormatError(f"checkpoint is missing tensors: {sorted(missing)}")
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# scenario file: JSON with camera, skeleton reference + hash, per-dancer
# tracks/confidences/contacts, depth annotation triples, optional referenced
# ground-truth motion and feature files (hash-checked at load).

SCENARIO_VERSION = 1


@dataclass
class ScenarioBundle:
    camera: Camera
    skeleton: Skeleton
    tracks: list
    contacts: list
    annotation: DepthAnnotation
    ground_truth: list | None = None
    features: MusicFeatures | None = None
    plane: GroundPlane | None = None


def save_scenario(scenario: SyntheticScenario, out_dir) -> Path:
    """Write scenario.json plus referenced motion/feature containers."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_motion(scenario.motions, out_dir / "motion.gmc")
    save_features(scenario.features, out_dir / "features.gmf")
    doc = {
        "version": SCENARIO_VERSION,
        "camera": dataclasses.asdict(scenario.camera),
        "skeleton": {"asset": str(default_skeleton_path()), "sha256": skeleton_file_hash()},
        "dancers": [
            {
                "keypoints": track.positions.tolist(),
                "confidences": track.confidences.tolist(),
                "contacts": contact.labels.astype(int).tolist(),
            }
            for track, contact in zip(scenario.tracks, scenario.contacts)
        ],
        "depth_annotations": scenario.annotation.items.tolist(),
        "ground_truth": {"path": "motion.gmc", "sha256": sha256_file(out_dir / "motion.gmc")},
        "features": {"path": "features.gmf", "sha256": sha256_file(out_dir / "features.gmf")},
        "plane": {
            "normal": scenario.plane.normal.tolist(),
            "point": scenario.plane.point.tolist(),
        },
        "synth_spec": dataclasses.asdict(scenario.spec),
        "mark_frames": scenario.mark_frames.tolist(),
    }
    path = out_dir / "scenario.json"
    atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def load_scenario(path) -> ScenarioBundle:
    path = Path(path)
    if path.is_dir():
        path = path / "scenario.json"
    doc = json.loads(path.read_text())
    if doc.get("version") != SCENARIO_VERSION:
        raise FormatError(f"unsupported scenario version {doc.get('version')}")
    base = path.parent

    skel_ref = doc["skeleton"]
    skel_path = Path(skel_ref["asset"])
    if not skel_path.is_absolute():
        skel_path = base / skel_path
    if not skel_path.exists():
        raise FormatError(f"skeleton asset {skel_path} does not exist")
    actual = skeleton_file_hash(skel_path)
    if actual != skel_ref["sha256"]:
        raise FormatError(
            f"skeleton asset hash mismatch: scenario pins {skel_ref['sha256'][:12]}..., file is {actual[:12]}..."
        )
    skeleton = load_skeleton(skel_path)

    camera = Camera(**doc["camera"])
    tracks, contacts = [], []
    for dancer in doc["dancers"]:
        tracks.append(
            KeypointTrack(
                positions=np.asarray(dancer["keypoints"], dtype=np.float64),
                confidences=np.asarray(dancer["confidences"], dtype=np.float64),
            )
        )
        contacts.append(ContactLabels(labels=np.asarray(dancer["contacts"])))
    annotation = DepthAnnotation(items=np.asarray(doc["depth_annotations"], dtype=np.int64))

    def _load_ref(entry, loader):
        if entry is None:
            return None
        ref_path = Path(entry["path"])
        if not ref_path.is_absolute():
            ref_path = base / ref_path
        if not ref_path.exists():
            raise FormatError(f"referenced file {ref_path} does not exist")
        actual = sha256_file(ref_path)
        if actual != entry["sha256"]:
            raise FormatError(
                f"referenced file {ref_path.name} hash mismatch: expected "
                f"{entry['sha256'][:12]}..., got {actual[:12]}..."
            )
        return loader(ref_path)

    ground_truth = _load_ref(doc.get("ground_truth"), read_motion)
    features = _load_ref(doc.get("features"), load_features)
    plane = None
    if doc.get("plane") is not None:
        plane = GroundPlane(
            normal=np.asarray(doc["plane"]["normal"], dtype=np.float64),
            point=np.asarray(doc["plane"]["point"], dtype=np.float64),
        )
    return ScenarioBundle(
        camera=camera,
        skeleton=skeleton,
        tracks=tracks,
        contacts=contacts,
        annotation=annotation,
        ground_truth=ground_truth,
        features=features,
        plane=plane,
    )


# ---------------------------------------------------------------------------
# run configuration

@dataclass
class MetricsConfig:
    sigma_seconds: float = 0.1

    def __post_init__(self):
        if self.sigma_seconds <= 0:
            raise InvalidArgumentError("sigma_seconds must be positive")


@dataclass
class FeaturesConfig:
    contact_height_eps: float = 0.05
    contact_vel_eps: float = 0.02
    noise_px: float = 0.0

    def __post_init__(self):
        if self.contact_height_eps <= 0 or self.contact_vel_eps <= 0:
            raise InvalidArgumentError("contact thresholds must be positive")
        if self.noise_px < 0:
            raise InvalidArgumentError("noise_px must be non-negative")


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 0  # 0 = leave torch's default; env GCHOREO_THREADS wins
    local_fit: LocalFitConfig = field(default_factory=LocalFitConfig)
    global_fit: GlobalFitConfig = field(default_factory=GlobalFitConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    features: FeaturesConfig = field(default_factory=FeaturesConfig)


_SUBCONFIGS = {
    "local_fit": LocalFitConfig,
    "global_fit": GlobalFitConfig,
    "generator": GeneratorConfig,
    "train": TrainConfig,
    "metrics": MetricsConfig,
    "features": FeaturesConfig,
}


def _build_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key")
        if cls is RunConfig and key in _SUBCONFIGS:
            kwargs[key] = _build_dataclass(_SUBCONFIGS[key], value, f"{path}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except InvalidArgumentError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def run_config_from_dict(data: dict) -> RunConfig:
    """Validate a config mapping; unknown keys and invalid values raise
    ConfigError with a path-qualified message."""
    return _build_dataclass(RunConfig, data, "config")


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    return run_config_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# manifest

MANIFEST_VERSION = 1


def write_manifest(out_dir, command: str, args: dict, inputs, outputs, seed, wall_time_s: float) -> Path:
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "args": {
            k: v for k, v in sorted(args.items())
            if k not in ("func", "command") and (v is None or isinstance(v, (str, int, float, bool)))
        },
        "inputs": {str(p): sha256_file(p) for p in sorted(map(str, inputs))},
        "outputs": {str(p): sha256_file(p) for p in sorted(map(str, outputs))},
        "seed": seed,
        "versions": {
            "gchoreo": __version__,
            "python": sys.version.split()[0],
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
        "wall_time_s": wall_time_s,
    }
    path = Path(out_dir) / "manifest.json" if Path(out_dir).is_dir() else Path(out_dir)
    atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(f"{v!r}" if isinstance(v, float) else str(v) for v in row))
    atomic_write_text(Path(path), "\n".join(lines) + "\n")

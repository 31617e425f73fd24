"""Music features and the synthetic scenario generator.

The reduced feature layout is mfcc(13) + mfcc_delta(13) + onset(1) + beat(1)
= 28 columns at 30 FPS; externally computed feature matrices of any width
(e.g. the full 438-dim set) load through the same container with layout
"external". Synthetic scenarios pair constructed group motions with tracks,
contact labels, ordinal depth annotations, a ground plane, and periodic
features whose beat column marks the motion's direction changes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct, rfft

from .body_model import Camera, GroundPlane, MotionSequence, load_skeleton, motion_joints, project
from .errors import CorruptionError, FormatError, InvalidArgumentError
from .global_fit import DepthAnnotation
from .local_fit import ContactLabels, KeypointTrack

FRAME_RATE = 30.0
MEL_BANDS = 40
N_MFCC = 13
N_FFT = 2048
FMIN_HZ = 20.0
LOG_FLOOR = 1e-10
TEMPO_RANGE_BPM = (60.0, 180.0)

DEFAULT_LAYOUT = (("mfcc", N_MFCC), ("mfcc_delta", N_MFCC), ("onset", 1), ("beat", 1))


@dataclass
class MusicFeatures:
    """Feature matrix (T, d) at 30 FPS with a named column-block layout."""

    data: np.ndarray
    layout: tuple = DEFAULT_LAYOUT
    fps: float = FRAME_RATE

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.layout = tuple((str(n), int(w)) for n, w in self.layout)
        if self.data.ndim != 2:
            raise InvalidArgumentError("feature matrix must be 2-D (frames x dims)")
        if not np.isfinite(self.data).all():
            raise InvalidArgumentError("feature matrix contains non-finite entries")
        if sum(w for _, w in self.layout) != self.data.shape[1]:
            raise InvalidArgumentError("layout widths do not sum to the feature dimension")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def block(self, name: str) -> np.ndarray:
        start = 0
        for n, w in self.layout:
            if n == name:
                return self.data[:, start : start + w]
            start += w
        raise InvalidArgumentError(f"layout has no block named {name!r}")

    def beat_frames(self) -> np.ndarray:
        return np.flatnonzero(self.block("beat")[:, 0] > 0.5)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: float, n_fft: int, n_bands: int, fmin: float) -> np.ndarray:
    """Triangular filters (n_bands, n_fft//2 + 1) on the HTK mel scale."""
    fmax = sample_rate / 2.0
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_bands + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bins = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fb = np.zeros((n_bands, len(bins)))
    for b in range(n_bands):
        lo, mid, hi = hz_pts[b], hz_pts[b + 1], hz_pts[b + 2]
        rising = (bins - lo) / max(mid - lo, 1e-12)
        falling = (hi - bins) / max(hi - mid, 1e-12)
        fb[b] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def _frame_signal(samples: np.ndarray, sample_rate: float, n_frames: int) -> np.ndarray:
    """(n_frames, N_FFT) windows centered at k * sample_rate / 30."""
    half = N_FFT // 2
    padded = np.pad(samples, (half, half + N_FFT), mode="reflect" if len(samples) > 1 else "constant")
    window = np.hanning(N_FFT)
    out = np.empty((n_frames, N_FFT))
    for k in range(n_frames):
        center = int(round(k * sample_rate / FRAME_RATE))
        out[k] = padded[center : center + N_FFT] * window
    return out


def detect_beats(onset: np.ndarray, fps: float = FRAME_RATE) -> np.ndarray:
    """Beat frame indices: autocorrelation tempo in 60-180 BPM, greedy peak snapping."""
    env = np.asarray(onset, dtype=np.float64)
    if env.size == 0 or env.max() <= 0:
        return np.zeros(0, dtype=np.int64)
    env = env / env.max()
    lag_min = max(2, int(round(fps * 60.0 / TEMPO_RANGE_BPM[1])))
    lag_max = min(len(env) - 1, int(round(fps * 60.0 / TEMPO_RANGE_BPM[0])))
    if lag_max < lag_min:
        return np.zeros(0, dtype=np.int64)
    scores = [float(env[lag:] @ env[:-lag]) for lag in range(lag_min, lag_max + 1)]
    period = lag_min + int(np.argmax(scores))

    anchor = int(np.argmax(env))
    beats = {anchor}
    snap = 2
    for direction in (1, -1):
        pos = anchor
        while True:
            nxt = pos + direction * period
            if nxt < 0 or nxt >= len(env):
                break
            lo = max(0, nxt - snap)
            hi = min(len(env), nxt + snap + 1)
            nxt = lo + int(np.argmax(env[lo:hi]))
            beats.add(nxt)
            pos = nxt
    return np.array(sorted(beats), dtype=np.int64)


def extract_features(samples, sample_rate: float) -> MusicFeatures:
    """Reduced feature set from mono PCM: MFCC, MFCC delta, onset strength, beats."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if sample_rate < 8000:
        raise InvalidArgumentError(f"sample rate must be >= 8 kHz, got {sample_rate}")
    n_frames = int(np.floor(len(samples) * FRAME_RATE / sample_rate))
    if n_frames < 1:
        raise InvalidArgumentError("signal shorter than one 30 FPS frame")

    frames = _frame_signal(samples, sample_rate, n_frames)
    spectrum = np.abs(rfft(frames, axis=1))
    power = spectrum**2
    fb = mel_filterbank(sample_rate, N_FFT, MEL_BANDS, FMIN_HZ)
    mel_power = power @ fb.T
    # log scale referenced to the signal's peak mel power with a relative floor,
    # so the cepstrum's DC coefficient carries the (sign-coherent) floor level
    ref = max(float(mel_power.max()), LOG_FLOOR)
    log_mel = np.log(np.maximum(mel_power, LOG_FLOOR * ref) / ref)
    mfcc = dct(log_mel, type=2, norm="ortho", axis=1)[:, :N_MFCC]

    delta = np.zeros_like(mfcc)
    if n_frames > 2:
        delta[1:-1] = 0.5 * (mfcc[2:] - mfcc[:-2])
        delta[0] = mfcc[1] - mfcc[0]
        delta[-1] = mfcc[-1] - mfcc[-2]
    elif n_frames == 2:
        delta[0] = delta[1] = mfcc[1] - mfcc[0]

    mel_mag = np.sqrt(mel_power)
    onset = np.zeros(n_frames)
    if n_frames > 1:
        onset[1:] = np.maximum(mel_mag[1:] - mel_mag[:-1], 0.0).sum(axis=1)

    beat = np.zeros(n_frames)
    beat[detect_beats(onset)] = 1.0

    data = np.concatenate([mfcc, delta, onset[:, None], beat[:, None]], axis=1)
    return MusicFeatures(data=data, layout=DEFAULT_LAYOUT)


FEATURE_MAGIC = b"GMF1"
FEATURE_VERSION = 1


def save_features(features: MusicFeatures, path) -> None:
    header = json.dumps(
        {"layout": [[n, w] for n, w in features.layout], "fps": features.fps},
        sort_keys=True,
    ).encode("utf-8")
    body = bytearray()
    body += FEATURE_MAGIC
    body += struct.pack("<III", FEATURE_VERSION, features.num_frames, features.dim)
    body += struct.pack("<I", len(header))
    body += header
    body += np.ascontiguousarray(features.data, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    from .io import atomic_write_bytes

    atomic_write_bytes(Path(path), bytes(body))


def load_features(path) -> MusicFeatures:
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise FormatError("feature file truncated", offset=len(raw))
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}", offset=0)
    version, n_frames, dim = struct.unpack_from("<III", raw, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature container version {version}", offset=4)
    (header_len,) = struct.unpack_from("<I", raw, 16)
    header_end = 20 + header_len
    payload_end = header_end + n_frames * dim * 8
    if len(raw) != payload_end + 4:
        raise CorruptionError(
            f"declared {n_frames}x{dim} payload does not match file size", offset=len(raw)
        )
    (stored_crc,) = struct.unpack_from("<I", raw, payload_end)
    actual_crc = zlib.crc32(raw[:payload_end])
    if stored_crc != actual_crc:
        raise CorruptionError("feature payload CRC mismatch", offset=payload_end)
    header = json.loads(raw[20:header_end].decode("utf-8"))
    data = np.frombuffer(raw[header_end:payload_end], dtype="<f8").reshape(n_frames, dim).copy()
    layout = tuple((n, int(w)) for n, w in header["layout"])
    return MusicFeatures(data=data, layout=layout, fps=float(header["fps"]))


PATTERNS = ("static", "circle", "wave", "crossing", "colliding", "gait")

# theta layout: joint j occupies theta[3j:3j+3]
_L_HIP, _R_HIP = 1, 2
_L_KNEE, _R_KNEE = 4, 5
_L_SHOULDER, _R_SHOULDER = 15, 16


@dataclass
class SynthSpec:
    pattern: str
    n_dancers: int = 2
    n_frames: int = 30
    noise_px: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise InvalidArgumentError(
                f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}"
            )
        if self.n_dancers < 1 or self.n_frames < 2:
            raise InvalidArgumentError("need n_dancers >= 1 and n_frames >= 2")


@dataclass
class SyntheticScenario:
    motions: list
    camera: Camera
    tracks: list
    contacts: list
    annotation: DepthAnnotation
    features: MusicFeatures
    plane: GroundPlane
    spec: SynthSpec
    mark_frames: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


DEFAULT_CAMERA = Camera(fx=1000.0, fy=1000.0, cx=500.0, cy=500.0)
BASE_DEPTH = 4.0
DANCER_SPACING = 2.0  # rest-pose arm spans clear each other
DEPTH_TIE_EPS = 0.05
GAIT_CYCLE = 30
GAIT_SWING = 0.4  # fraction of a half-cycle spent in swing


def _base_positions(n: int) -> np.ndarray:
    return np.array([(i - (n - 1) / 2.0) * DANCER_SPACING for i in range(n)])


def _mark_every(n_frames: int, period: int) -> np.ndarray:
    return np.arange(0, n_frames, period, dtype=np.int64)


def _pattern_motions(spec: SynthSpec, rng: np.random.Generator):
    """Per-pattern group motion, contact labels, and direction-change marks."""
    n, T = spec.n_dancers, spec.n_frames
    xs = _base_positions(n)
    t = np.arange(T, dtype=np.float64)
    half = 15  # frames per half-cycle at 30 FPS (one beat every 0.5 s)
    phase = 2.0 * np.pi * t / (2 * half)
    motions, contacts = [], []
    marks = _mark_every(T, half)

    for i in range(n):
        thetas = np.zeros((T, 69))
        taus = np.zeros((T, 3))
        taus[:, 0] = xs[i]
        taus[:, 2] = BASE_DEPTH
        c = np.zeros((T, 4))

        if spec.pattern == "static":
            c[:] = 1.0
        elif spec.pattern == "circle":
            radius = 0.4
            offset = np.pi * i / max(n - 1, 1)
            taus[:, 0] = xs[i] + radius * np.sin(phase + offset)
            taus[:, 2] = BASE_DEPTH + radius * np.cos(phase + offset)
        elif spec.pattern == "wave":
            swing = 0.5 * np.sin(phase + 0.3 * i)
            thetas[:, 3 * _L_SHOULDER + 2] = swing
            thetas[:, 3 * _R_SHOULDER + 2] = -swing
            c[:] = 1.0
        elif spec.pattern == "crossing":
            # depths sweep so every pair swaps order mid-sequence
            spread = 0.3 * (i - (n - 1) / 2.0)
            sweep = np.cos(np.pi * t / (T - 1))  # +1 .. -1
            taus[:, 2] = BASE_DEPTH + spread * sweep
        elif spec.pattern == "colliding":
            # dancers converge onto the group center and hold overlapped
            ramp = np.clip((t - T / 3.0) / max(T / 3.0, 1.0), 0.0, 1.0)
            ease = 0.5 - 0.5 * np.cos(np.pi * ramp)
            taus[:, 0] = xs[i] * (1.0 - ease * 0.95)
        elif spec.pattern == "gait":
            s = (t % GAIT_CYCLE) / GAIT_CYCLE  # cycle position in [0, 1)
            left_swing = s < GAIT_SWING
            right_swing = (s >= 0.5) & (s < 0.5 + GAIT_SWING)
            lift_l = np.where(left_swing, np.sin(np.pi * np.clip(s / GAIT_SWING, 0, 1)) ** 2, 0.0)
            lift_r = np.where(
                right_swing, np.sin(np.pi * np.clip((s - 0.5) / GAIT_SWING, 0, 1)) ** 2, 0.0
            )
            thetas[:, 3 * _L_HIP + 0] = -1.0 * lift_l
            thetas[:, 3 * _L_KNEE + 0] = 1.2 * lift_l
            thetas[:, 3 * _R_HIP + 0] = -1.0 * lift_r
            thetas[:, 3 * _R_KNEE + 0] = 1.2 * lift_r
            c[:, 0] = (~left_swing).astype(float)  # l_ankle
            c[:, 2] = (~left_swing).astype(float)  # l_toe
            c[:, 1] = (~right_swing).astype(float)  # r_ankle
            c[:, 3] = (~right_swing).astype(float)  # r_toe
            marks = _mark_every(T, GAIT_CYCLE // 2)

        motions.append(MotionSequence(thetas=thetas, taus=taus))
        contacts.append(ContactLabels(labels=c))
    return motions, contacts, marks


def _annotate_depths(motions) -> DepthAnnotation:
    items = []
    n = len(motions)
    T = motions[0].num_frames
    for t in range(T):
        for p in range(n):
            for q in range(p + 1, n):
                dz = motions[p].taus[t, 2] - motions[q].taus[t, 2]
                if abs(dz) < DEPTH_TIE_EPS:
                    r = 0
                elif dz < 0:
                    r = 1  # p closer (smaller depth)
                else:
                    r = -1
                items.append((t, p, q, r))
    return DepthAnnotation(items=np.array(items, dtype=np.int64).reshape(-1, 4))


def _synthetic_features(T: int, marks: np.ndarray, rng: np.random.Generator) -> MusicFeatures:
    t = np.arange(T) / FRAME_RATE
    freqs = 0.5 + rng.uniform(0.0, 2.0, size=N_MFCC)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=N_MFCC)
    mfcc = np.stack(
        [np.sin(2 * np.pi * freqs[k] * t + phases[k]) for k in range(N_MFCC)], axis=1
    )
    delta = np.zeros_like(mfcc)
    if T > 2:
        delta[1:-1] = 0.5 * (mfcc[2:] - mfcc[:-2])
        delta[0] = mfcc[1] - mfcc[0]
        delta[-1] = mfcc[-1] - mfcc[-2]
    onset = np.zeros(T)
    beat = np.zeros(T)
    valid = marks[(marks >= 0) & (marks < T)]
    onset[valid] = 1.0
    beat[valid] = 1.0
    data = np.concatenate([mfcc, delta, onset[:, None], beat[:, None]], axis=1)
    return MusicFeatures(data=data, layout=DEFAULT_LAYOUT)


def synth_scenario(spec: SynthSpec, skeleton=None) -> SyntheticScenario:
    """Deterministic synthetic fitting/generation problem for the given pattern."""
    skeleton = skeleton if skeleton is not None else load_skeleton()
    rng = np.random.default_rng(spec.seed)
    motions, contacts, marks = _pattern_motions(spec, rng)

    camera = DEFAULT_CAMERA
    tracks = []
    for motion in motions:
        joints = motion_joints(motion, skeleton)
        pix = project(joints, camera)
        if spec.noise_px > 0:
            pix = pix + rng.normal(0.0, spec.noise_px, size=pix.shape)
        tracks.append(
            KeypointTrack(positions=pix, confidences=np.ones(pix.shape[:2]))
        )

    annotation = _annotate_depths(motions)
    features = _synthetic_features(spec.n_frames, marks, rng)

    rest_foot_y = float(
        motion_joints(motions[0], skeleton)[0, list(skeleton.feet), 1].max()
    )
    plane = GroundPlane(normal=np.array([0.0, -1.0, 0.0]), point=np.array([0.0, rest_foot_y, BASE_DEPTH]))

    return SyntheticScenario(
        motions=motions,
        camera=camera,
        tracks=tracks,
        contacts=contacts,
        annotation=annotation,
        features=features,
        plane=plane,
        spec=spec,
        mark_frames=marks,
    )

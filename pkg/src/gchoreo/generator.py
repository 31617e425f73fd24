"""GDanceR: music-conditioned autoregressive group-motion generator.

Pipeline: transformer music encoder -> initial-pose MLP from (mean audio,
starting position) -> L stacked group-encoder layers, each an LSTM cell plus
cross-entity attention whose logits and value vectors carry the spatial
proximity weight e_ij = exp(-||tau_i - tau_j||^2 / sqrt(3)) -> additive fusion
z = h + g -> shared pose decoder MLP([z; a_t]) -> 72-dim pose [tau; theta].

Everything runs in float64 so group-permutation equivariance holds to 1e-12.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .body_model import POSE_DIM, MotionSequence
from .errors import InvalidArgumentError, TrainingFailureError
from .numerics import as_tensor, softmax

TAU_DIM = 3


@dataclass
class GeneratorConfig:
    audio_dim: int = 438
    d_model: int = 1024  # hidden audio d_a = hidden motion d_h
    encoder_layers: int = 2
    encoder_heads: int = 8
    group_layers: int = 3
    attn_heads: int = 8
    head_dim: int = 64  # d_k = d_v per attention head
    mlp_hidden: int = 512
    mlp_layers: int = 3
    window: int = 240
    pose_dim: int = POSE_DIM

    def __post_init__(self):
        for name in ("audio_dim", "d_model", "encoder_layers", "encoder_heads",
                     "group_layers", "attn_heads", "head_dim", "mlp_hidden",
                     "mlp_layers", "window", "pose_dim"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        if self.d_model % self.encoder_heads != 0:
            raise InvalidArgumentError("d_model must be divisible by encoder_heads")
        if self.attn_heads * self.head_dim > self.d_model:
            raise InvalidArgumentError("attn_heads * head_dim must not exceed d_model")

    @staticmethod
    def test_profile(audio_dim: int = 28, window: int = 32) -> "GeneratorConfig":
        """Paper architecture at 1/32 scale for desk-size experiments."""
        return GeneratorConfig(
            audio_dim=audio_dim,
            d_model=32,
            encoder_layers=2,
            encoder_heads=2,
            group_layers=3,
            attn_heads=2,
            head_dim=8,
            mlp_hidden=16,
            mlp_layers=3,
            window=window,
        )


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    teacher_forcing_start: float = 1.0
    teacher_forcing_end: float = 0.1
    teacher_forcing_decay_frac: float = 0.5

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidArgumentError("learning rate must be positive")
        if self.batch_size < 1 or self.steps < 1:
            raise InvalidArgumentError("batch_size and steps must be >= 1")

    def teacher_forcing_prob(self, step: int) -> float:
        horizon = max(1.0, self.teacher_forcing_decay_frac * self.steps)
        frac = min(1.0, step / horizon)
        return self.teacher_forcing_start + (self.teacher_forcing_end - self.teacher_forcing_start) * frac


def sinusoidal_position_encoding(length: int, dim: int) -> torch.Tensor:
    position = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(
        torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim)
    )
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: (dim - dim // 2)])
    return pe


class SelfAttention(nn.Module):
    """Unmasked scaled dot-product self-attention over the time axis."""

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d_model // heads
        self.qkv = nn.Linear(d_model, 3 * d_model, bias=False)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor):
        T, _ = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.reshape(T, self.heads, self.head_dim).transpose(0, 1)
        k = k.reshape(T, self.heads, self.head_dim).transpose(0, 1)
        v = v.reshape(T, self.heads, self.head_dim).transpose(0, 1)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        attn = softmax(logits, dim=-1)
        mixed = (attn @ v).transpose(0, 1).reshape(T, -1)
        return self.out(mixed), attn


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.attn = SelfAttention(d_model, heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.ReLU(), nn.Linear(4 * d_model, d_model)
        )
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor):
        mixed, attn = self.attn(x)
        x = self.norm1(x + mixed)
        x = self.norm2(x + self.ff(x))
        return x, attn


class MusicEncoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(cfg.audio_dim, cfg.d_model)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.d_model, cfg.encoder_heads) for _ in range(cfg.encoder_layers)
        )

    def forward(self, features: torch.Tensor, return_attn: bool = False):
        T = features.shape[0]
        x = self.input_proj(features) + sinusoidal_position_encoding(T, self.cfg.d_model)
        attns = []
        for layer in self.layers:
            x, attn = layer(x)
            attns.append(attn)
        return (x, attns) if return_attn else x


class PoseMLP(nn.Module):
    """MLP with layer normalization and ReLU at each hidden layer."""

    def __init__(self, in_dim: int, hidden: int, n_hidden: int, out_dim: int):
        super().__init__()
        layers = []
        dim = in_dim
        for _ in range(n_hidden):
            layers += [nn.Linear(dim, hidden), nn.LayerNorm(hidden), nn.ReLU()]
            dim = hidden
        layers.append(nn.Linear(dim, out_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def spatial_encoding(tau_i, tau_j) -> float:
    """Proximity weight exp(-||tau_i - tau_j||^2 / sqrt(3)) in (0, 1]."""
    ti = as_tensor(tau_i)
    tj = as_tensor(tau_j)
    return float(torch.exp(-((ti - tj) ** 2).sum() / math.sqrt(TAU_DIM)))


def spatial_matrix_t(taus: torch.Tensor) -> torch.Tensor:
    """Pairwise proximity weights (N, N) from root translations (N, 3)."""
    diff = taus[:, None, :] - taus[None, :, :]
    return torch.exp(-(diff * diff).sum(-1) / math.sqrt(TAU_DIM))


class CrossEntityAttention(nn.Module):
    """Attention across dancers with the proximity weight added to the logits
    and scaling a learnable per-head value bias."""

    def __init__(self, d_h: int, heads: int, d_k: int, d_v: int | None = None):
        super().__init__()
        d_v = d_k if d_v is None else d_v
        self.heads = heads
        self.d_k = d_k
        self.d_v = d_v
        self.wq = nn.Linear(d_h, heads * d_k, bias=False)
        self.wk = nn.Linear(d_h, heads * d_k, bias=False)
        self.wv = nn.Linear(d_h, heads * d_v, bias=False)
        self.gamma = nn.Parameter(torch.zeros(heads, d_v))
        self.out = nn.Linear(heads * d_v, d_h, bias=False)

    def forward(self, hiddens: torch.Tensor, taus: torch.Tensor, spatial: torch.Tensor | None = None):
        N = hiddens.shape[0]
        e = spatial_matrix_t(taus) if spatial is None else spatial
        q = self.wq(hiddens).reshape(N, self.heads, self.d_k).transpose(0, 1)
        k = self.wk(hiddens).reshape(N, self.heads, self.d_k).transpose(0, 1)
        v = self.wv(hiddens).reshape(N, self.heads, self.d_v).transpose(0, 1)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_k) + e[None]
        alpha = softmax(logits, dim=-1)  # (heads, N, N)
        # sum_j alpha_ij * (v_j + e_ij * gamma)
        heads_out = alpha @ v + (alpha * e[None]).sum(-1)[..., None] * self.gamma[:, None, :]
        g = self.out(heads_out.transpose(0, 1).reshape(N, -1))
        aux = {"alpha": alpha, "head_outputs": heads_out, "spatial": e}
        return g, aux


class GroupEncoderLayer(nn.Module):
    def __init__(self, in_dim: int, d_h: int, heads: int, d_k: int):
        super().__init__()
        self.cell = nn.LSTMCell(in_dim, d_h)
        self.attn = CrossEntityAttention(d_h, heads, d_k)

    def forward(self, x: torch.Tensor, hc, taus: torch.Tensor, spatial: torch.Tensor | None = None):
        h, c = self.cell(x, hc)
        g, aux = self.attn(h, taus, spatial=spatial)
        return h + g, (h, c), aux


@dataclass
class GroupState:
    """Recurrent state carried between autoregressive steps."""

    hs: list
    cs: list
    y_prev: torch.Tensor  # (N, 72)
    tau_prev: torch.Tensor  # (N, 3)

    def advance(self, y_next: torch.Tensor) -> "GroupState":
        """State whose next-step input is `y_next` (its tau feeds the spatial bias)."""
        return replace(self, y_prev=y_next, tau_prev=y_next[:, :TAU_DIM])


class GDanceR(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.music_encoder = MusicEncoder(cfg)
        self.initial_pose_mlp = PoseMLP(cfg.d_model + TAU_DIM, cfg.mlp_hidden, cfg.mlp_layers, cfg.pose_dim)
        layers = []
        for layer_idx in range(cfg.group_layers):
            in_dim = cfg.pose_dim if layer_idx == 0 else cfg.d_model
            layers.append(GroupEncoderLayer(in_dim, cfg.d_model, cfg.attn_heads, cfg.head_dim))
        self.group_layers = nn.ModuleList(layers)
        self.decoder = PoseMLP(2 * cfg.d_model, cfg.mlp_hidden, cfg.mlp_layers, cfg.pose_dim)
        self.double()


def init_params(cfg: GeneratorConfig, seed: int = 0) -> GDanceR:
    """Construct a model with seed-controlled uniform fan-in initialization."""
    torch.manual_seed(seed)
    return GDanceR(cfg)


def encode_music(features, model: GDanceR, return_attn: bool = False):
    """Hidden audio sequence (T, d_model) from raw features (T, audio_dim)."""
    x = as_tensor(features)
    if x.ndim != 2 or x.shape[1] != model.cfg.audio_dim:
        raise InvalidArgumentError(
            f"features must be (T, {model.cfg.audio_dim}), got {tuple(x.shape)}"
        )
    if x.shape[0] < 1:
        raise InvalidArgumentError("need at least one feature frame")
    return model.music_encoder(x, return_attn=return_attn)


def initial_pose(audio: torch.Tensor, tau0, model: GDanceR) -> torch.Tensor:
    """Initial 72-dim pose(s) from mean audio and starting position(s)."""
    a_mean = as_tensor(audio).mean(dim=0)
    t0 = as_tensor(tau0)
    if t0.ndim == 1:
        return model.initial_pose_mlp(torch.cat([a_mean, t0]))
    return model.initial_pose_mlp(torch.cat([a_mean.expand(t0.shape[0], -1), t0], dim=-1))


def cross_entity_attention(hiddens, taus, model: GDanceR, layer: int = 0):
    """Global-aware representations (N, d_model) plus attention internals."""
    return model.group_layers[layer].attn(as_tensor(hiddens), as_tensor(taus))


def init_state(model: GDanceR, y0: torch.Tensor, tau0: torch.Tensor) -> GroupState:
    n = y0.shape[0]
    zeros = lambda: torch.zeros(n, model.cfg.d_model, dtype=torch.float64)
    return GroupState(
        hs=[zeros() for _ in model.group_layers],
        cs=[zeros() for _ in model.group_layers],
        y_prev=y0,
        tau_prev=as_tensor(tau0),
    )


def group_step(state: GroupState, a_t: torch.Tensor, model: GDanceR):
    """One autoregressive step: poses (N, 72) for every dancer plus next state.

    The returned state feeds the generated poses forward; training overrides
    that via GroupState.advance when teacher forcing.
    """
    x = state.y_prev
    spatial = spatial_matrix_t(state.tau_prev)  # tau is fixed within a step, shared by all layers
    hs, cs, auxes = [], [], []
    for layer, h, c in zip(model.group_layers, state.hs, state.cs):
        x, (h2, c2), aux = layer(x, (h, c), state.tau_prev, spatial=spatial)
        hs.append(h2)
        cs.append(c2)
        auxes.append(aux)
    n = x.shape[0]
    y = model.decoder(torch.cat([x, a_t.expand(n, -1)], dim=-1))
    next_state = GroupState(hs=hs, cs=cs, y_prev=y, tau_prev=y[:, :TAU_DIM])
    return y, next_state, auxes


def rollout(
    model: GDanceR,
    features,
    taus0,
    ground_truth: torch.Tensor | None = None,
    teacher_forcing: float = 0.0,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Predicted poses (N, T, 72). Frame 0 comes from the initial-pose head.

    With ground truth, each step's input is the true previous pose with
    probability `teacher_forcing`, else the model's own prediction.
    """
    audio = encode_music(features, model)
    T = audio.shape[0]
    t0 = as_tensor(taus0)
    y0 = initial_pose(audio, t0, model)
    outputs = [y0]
    state = init_state(model, y0, t0)
    draws = None
    if ground_truth is not None and 0.0 < teacher_forcing < 1.0 and rng is not None:
        draws = torch.rand(max(T - 1, 1), generator=rng, dtype=torch.float64).tolist()
    for t in range(1, T):
        if ground_truth is not None:
            if teacher_forcing >= 1.0:
                use_gt = True  # probability-1 path draws nothing: exact teacher forcing
            elif draws is None:
                use_gt = False
            else:
                use_gt = draws[t - 1] < teacher_forcing
            if use_gt:
                state = state.advance(ground_truth[:, t - 1])
                if t == 1:
                    state = replace(state, tau_prev=t0)
        y, state, _ = group_step(state, audio[t], model)
        outputs.append(y)
    return torch.stack(outputs, dim=1)


def sequence_loss(
    model: GDanceR,
    features,
    gt_poses: torch.Tensor,
    taus0,
    teacher_forcing: float = 1.0,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Mean squared error over all dancers, frames, and pose coordinates."""
    pred = rollout(model, features, taus0, ground_truth=gt_poses, teacher_forcing=teacher_forcing, rng=rng)
    return ((pred - gt_poses) ** 2).mean()


def _group_to_packed(group) -> torch.Tensor:
    return torch.stack([as_tensor(m.packed()) for m in group], dim=0)


def train(dataset, train_cfg: TrainConfig, gen_cfg: GeneratorConfig):
    """Train on (MusicFeatures, group motion list) pairs; returns (model, loss trace).

    Every step samples `batch_size` windows of `gen_cfg.window` frames; a batch
    item keeps all dancers of its group together. trace[k] is the loss at the
    parameters before update k.
    """
    if not dataset:
        raise InvalidArgumentError("dataset must not be empty")
    prepared = []
    for features, group in dataset:
        data = features.data if hasattr(features, "data") else np.asarray(features)
        packed = _group_to_packed(group)
        if data.shape[0] != packed.shape[1]:
            raise InvalidArgumentError("features and motion must have equal frame counts")
        if data.shape[0] < gen_cfg.window:
            raise InvalidArgumentError(
                f"sequence of {data.shape[0]} frames is shorter than the window {gen_cfg.window}"
            )
        prepared.append((as_tensor(data), packed))

    model = init_params(gen_cfg, seed=train_cfg.seed)
    rng = torch.Generator().manual_seed(train_cfg.seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    trace = []
    for step in range(train_cfg.steps):
        p_tf = train_cfg.teacher_forcing_prob(step)
        losses = []
        for _ in range(train_cfg.batch_size):
            idx = int(torch.randint(len(prepared), (), generator=rng))
            feats, packed = prepared[idx]
            T = feats.shape[0]
            start = 0
            if T > gen_cfg.window:
                start = int(torch.randint(T - gen_cfg.window + 1, (), generator=rng))
            window = slice(start, start + gen_cfg.window)
            gt = packed[:, window]
            losses.append(
                sequence_loss(model, feats[window], gt, gt[:, 0, :TAU_DIM], teacher_forcing=p_tf, rng=rng)
            )
        loss = torch.stack(losses).mean()
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingFailureError(step)
        trace.append(value)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model, trace


def generate(features, taus0, model: GDanceR, fps: float = 30.0):
    """Autoregressive group motion for the whole feature sequence.

    Returns one MotionSequence per dancer; frame 0 is the initial-pose output.
    """
    t0 = np.asarray(taus0, dtype=np.float64).reshape(-1, TAU_DIM)
    if t0.shape[0] < 1:
        raise InvalidArgumentError("need at least one dancer")
    with torch.no_grad():
        packed = rollout(model, features.data if hasattr(features, "data") else features, t0)
    out = packed.numpy()
    return [MotionSequence.from_packed(out[i], fps=fps) for i in range(out.shape[0])]

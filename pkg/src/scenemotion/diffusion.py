"""Conditional denoising diffusion for trajectories and poses.

The denoiser is a transformer decoder: per-frame inputs become queries
(summed with sinusoidal frame-position embeddings), and the conditions form
a 4-token cross-attention memory [timestep, text, environment sensor,
target sensor], each projected to the shared token width by an MLP. In
motion mode the per-frame trajectory-sensor features are projected and
added to the matching frame query. The model predicts the clean signal x0
and trains on mean squared error against it.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import struct
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import NumericError, ValidationError

CHECKPOINT_MAGIC = b"TSM1"


# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances beta_t with alpha_t = 1 - beta_t and their running product."""

    betas: np.ndarray
    kind: str = "linear"
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64).reshape(-1)
        if betas.size < 1:
            raise ValidationError("schedule needs at least one step")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValidationError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(self.alphas))

    @property
    def t_steps(self) -> int:
        return self.betas.size

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at step t (1-indexed); t=0 gives 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])

    def q_sample(self, x0, t: int, noise):
        """Forward noising: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
        if not 1 <= t <= self.t_steps:
            raise ValidationError(f"t must lie in [1, {self.t_steps}], got {t}")
        if np.shape(x0) != np.shape(noise):
            raise ValidationError(
                f"noise shape {np.shape(noise)} must match x0 shape {np.shape(x0)}"
            )
        ab = self.alpha_bar(t)
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def make_schedule(t_steps: int, kind: str = "linear") -> NoiseSchedule:
    """Linear: beta evenly spaced over [1e-4, 0.02]. Cosine: squared-cosine alpha-bar."""
    if t_steps < 1:
        raise ValidationError(f"t_steps must be >= 1, got {t_steps}")
    if kind == "linear":
        betas = np.linspace(1e-4, 0.02, t_steps)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(t_steps + 1, dtype=np.float64)
        f = np.cos((steps / t_steps + s) / (1.0 + s) * math.pi / 2.0) ** 2
        alpha_bars = f / f[0]
        betas = np.clip(1.0 - alpha_bars[1:] / alpha_bars[:-1], 1e-8, 0.999)
    else:
        raise ValidationError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(betas, kind)


# ---------------------------------------------------------------------------
# conditions


@dataclass
class ConditionSet:
    """Features conditioning one generation: text L, environment E, target T, optional per-frame O."""

    text: np.ndarray
    env: np.ndarray
    target: np.ndarray
    traj: np.ndarray | None = None

    def __post_init__(self):
        self.text = np.asarray(self.text, dtype=np.float64).reshape(-1)
        self.env = np.asarray(self.env, dtype=np.float64).reshape(-1)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1)
        if self.traj is not None:
            self.traj = np.asarray(self.traj, dtype=np.float64)
            if self.traj.ndim != 2:
                raise ValidationError(f"traj features must be (N, dim), got {self.traj.shape}")
        for name, arr in (("text", self.text), ("env", self.env), ("target", self.target)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} features must be finite")
        if self.traj is not None and not np.all(np.isfinite(self.traj)):
            raise ValidationError("traj features must be finite")

    def without_text(self) -> "ConditionSet":
        return ConditionSet(np.zeros_like(self.text), self.env, self.target, self.traj)


# ---------------------------------------------------------------------------
# denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    mode: str                 # "trajectory" or "motion"
    frame_dim: int            # per-frame output width (trajectory 5; motion 6 + 6J)
    token_dim: int = 64       # shared token width (512 at full scale)
    layers: int = 2
    heads: int = 4
    ff_dim: int = 256
    max_frames: int = 128
    text_dim: int = 32
    env_dim: int = 3584
    target_dim: int = 3584
    traj_dim: int = 512

    def __post_init__(self):
        if self.mode not in ("trajectory", "motion"):
            raise ValidationError(f"unknown denoiser mode {self.mode!r}")
        if self.token_dim % self.heads != 0:
            raise ValidationError(
                f"token_dim {self.token_dim} must be divisible by head count {self.heads}"
            )
        if self.token_dim % 2 != 0:
            raise ValidationError("token_dim must be even for sinusoidal embeddings")
        for name in ("frame_dim", "layers", "heads", "ff_dim", "max_frames", "text_dim",
                     "env_dim", "target_dim", "traj_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    device = positions.device
    denom = max(half - 1, 1)
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, device=device, dtype=torch.float64) / denom)
    args = positions.double()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _mlp(in_dim: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))


class Denoiser(nn.Module):
    """Transformer decoder predicting x0 from (x_t, t, conditions).

    The output is anchored at sqrt(abar_t) * x_t, so the network learns the
    residual toward x0; the residual shrinks with the noise level, which
    keeps low-noise denoising steps accurate.
    """

    def __init__(self, config: DenoiserConfig, schedule: NoiseSchedule):
        super().__init__()
        self.config = config
        d = config.token_dim
        self.input_proj = nn.Linear(config.frame_dim, d)
        self.time_mlp = _mlp(d, d)
        self.text_proj = _mlp(config.text_dim, d)
        self.env_proj = _mlp(config.env_dim, d)
        self.target_proj = _mlp(config.target_dim, d)
        if config.mode == "motion":
            self.traj_proj = _mlp(config.traj_dim, d)
        layer = nn.TransformerDecoderLayer(
            d_model=d,
            nhead=config.heads,
            dim_feedforward=config.ff_dim,
            dropout=0.0,
            batch_first=True,
        )
        self.decoder = nn.TransformerDecoder(layer, num_layers=config.layers)
        self.head = nn.Linear(d, config.frame_dim)
        self.register_buffer(
            "sqrt_alpha_bars",
            torch.tensor(np.sqrt(schedule.alpha_bars), dtype=torch.float32),
        )

    @property
    def dtype(self):
        return self.head.weight.dtype

    def _queries(self, x, traj):
        """Per-frame tokens: projected input plus sinusoidal frame-position embedding."""
        cfg = self.config
        n_frames = x.shape[1]
        if x.shape[2] != cfg.frame_dim:
            raise ValidationError(f"frame dim {x.shape[2]} != configured {cfg.frame_dim}")
        if n_frames > cfg.max_frames:
            raise ValidationError(f"{n_frames} frames exceeds max_frames {cfg.max_frames}")
        if cfg.mode == "motion":
            if traj is None:
                raise ValidationError("motion mode needs per-frame trajectory features")
        elif traj is not None:
            raise ValidationError("trajectory mode takes no per-frame trajectory features")
        frame_pos = sinusoidal_embedding(
            torch.arange(n_frames, device=x.device), cfg.token_dim
        ).to(self.dtype)
        queries = self.input_proj(x) + frame_pos[None]
        if traj is not None:
            queries = queries + self.traj_proj(traj)
        return queries

    def _memory(self, t, text, env, target):
        """Condition tokens [timestep, text, env sensor, target sensor].

        Each slot gets a positional embedding, so cross-attention is
        deliberately sensitive to this token order.
        """
        dtype = self.dtype
        time_tok = self.time_mlp(sinusoidal_embedding(t.to(torch.float64), self.config.token_dim).to(dtype))
        memory = torch.stack(
            [time_tok, self.text_proj(text), self.env_proj(env), self.target_proj(target)],
            dim=1,
        )
        memory_pos = sinusoidal_embedding(torch.arange(4, device=memory.device), self.config.token_dim).to(dtype)
        return memory + memory_pos[None]

    def forward(self, x, t, text, env, target, traj=None):
        """x (B, N, frame_dim); t (B,) int steps; condition features batched likewise."""
        if torch.any(t < 1) or torch.any(t > self.sqrt_alpha_bars.shape[0]):
            raise ValidationError(
                f"t must lie in [1, {self.sqrt_alpha_bars.shape[0]}]"
            )
        queries = self._queries(x, traj)
        memory = self._memory(t, text, env, target)
        anchor = self.sqrt_alpha_bars.to(x.dtype)[t - 1][:, None, None] * x
        return self.head(self.decoder(queries, memory)) + anchor


@dataclass
class DiffusionModel:
    denoiser: Denoiser
    schedule: NoiseSchedule
    config: DenoiserConfig

    @property
    def mode(self) -> str:
        return self.config.mode


def build_model(config: DenoiserConfig, schedule: NoiseSchedule, seed: int = 0) -> DiffusionModel:
    """Construct a model with deterministically seeded initial weights."""
    torch.manual_seed(seed)
    return DiffusionModel(Denoiser(config, schedule), schedule, config)


def _cond_tensors(conds, config: DenoiserConfig, dtype, n_frames: int):
    """Stack a list of ConditionSets into batched tensors, validating dims."""
    text = np.stack([c.text for c in conds])
    env = np.stack([c.env for c in conds])
    target = np.stack([c.target for c in conds])
    for name, arr, want in (
        ("text", text, config.text_dim),
        ("env", env, config.env_dim),
        ("target", target, config.target_dim),
    ):
        if arr.shape[1] != want:
            raise ValidationError(f"{name} feature dim {arr.shape[1]} != configured {want}")
    has_traj = [c.traj is not None for c in conds]
    if config.mode == "motion":
        if not all(has_traj):
            raise ValidationError("motion mode needs trajectory features in every condition set")
        traj = np.stack([c.traj for c in conds])
        if traj.shape[1] != n_frames or traj.shape[2] != config.traj_dim:
            raise ValidationError(
                f"traj features {traj.shape[1:]} != expected ({n_frames}, {config.traj_dim})"
            )
        traj_t = torch.as_tensor(traj, dtype=dtype)
    else:
        if any(has_traj):
            raise ValidationError("trajectory mode takes no trajectory features")
        traj_t = None
    return (
        torch.as_tensor(text, dtype=dtype),
        torch.as_tensor(env, dtype=dtype),
        torch.as_tensor(target, dtype=dtype),
        traj_t,
    )


def denoise_forward(model: DiffusionModel, x_t, t: int, cond: ConditionSet) -> np.ndarray:
    """Deterministic single-sequence x0 prediction; accepts and returns numpy (N, frame_dim)."""
    denoiser = model.denoiser
    denoiser.eval()
    dtype = denoiser.dtype
    x = torch.as_tensor(np.asarray(x_t), dtype=dtype).reshape(1, -1, model.config.frame_dim)
    text, env, target, traj = _cond_tensors([cond], model.config, dtype, x.shape[1])
    with torch.no_grad():
        out = denoiser(x, torch.tensor([t]), text, env, target, traj)
    if not torch.isfinite(out).all():
        raise NumericError(f"non-finite denoiser output at step {t}")
    return out[0].cpu().numpy()


def training_loss(model: DiffusionModel, x0, t, cond, noise) -> torch.Tensor:
    """Mean squared error between x0 and the denoiser's prediction from x_t.

    x0/noise: (N, frame_dim) or (B, N, frame_dim); t: int or (B,) tensor;
    cond: ConditionSet or list of them. Returns a differentiable scalar.
    """
    denoiser = model.denoiser
    dtype = denoiser.dtype
    x0_t = torch.as_tensor(np.asarray(x0) if isinstance(x0, np.ndarray) else x0, dtype=dtype)
    noise_t = torch.as_tensor(np.asarray(noise) if isinstance(noise, np.ndarray) else noise, dtype=dtype)
    if x0_t.shape != noise_t.shape:
        raise ValidationError(f"noise shape {tuple(noise_t.shape)} must match x0 shape {tuple(x0_t.shape)}")
    squeeze = x0_t.dim() == 2
    if squeeze:
        x0_t = x0_t[None]
        noise_t = noise_t[None]
    conds = [cond] if isinstance(cond, ConditionSet) else list(cond)
    if len(conds) != x0_t.shape[0]:
        raise ValidationError(f"{len(conds)} condition sets for batch of {x0_t.shape[0]}")

    schedule = model.schedule
    if isinstance(t, int):
        t_tensor = torch.full((x0_t.shape[0],), t, dtype=torch.long)
    else:
        t_tensor = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if torch.any(t_tensor < 1) or torch.any(t_tensor > schedule.t_steps):
        raise ValidationError(f"t must lie in [1, {schedule.t_steps}]")
    ab = torch.as_tensor(schedule.alpha_bars, dtype=dtype)[t_tensor - 1]
    x_t = torch.sqrt(ab)[:, None, None] * x0_t + torch.sqrt(1.0 - ab)[:, None, None] * noise_t

    text, env, target, traj = _cond_tensors(conds, model.config, dtype, x0_t.shape[1])
    pred = denoiser(x_t, t_tensor, text, env, target, traj)
    if not torch.isfinite(pred).all():
        raise NumericError(
            f"non-finite denoiser activations (t range {int(t_tensor.min())}..{int(t_tensor.max())})"
        )
    return torch.mean((x0_t - pred) ** 2)


# ---------------------------------------------------------------------------
# sampling


def ddpm_sample_batch(model: DiffusionModel, cond, n_frames: int, n_samples: int,
                      seed: int = 0) -> np.ndarray:
    """Ancestral DDPM sampling, batched; deterministic for a given seed.

    cond is one ConditionSet shared by every sample or a list of n_samples.
    Returns (n_samples, n_frames, frame_dim).
    """
    denoiser = model.denoiser
    denoiser.eval()
    dtype = denoiser.dtype
    schedule = model.schedule
    conds = [cond] * n_samples if isinstance(cond, ConditionSet) else list(cond)
    if len(conds) != n_samples:
        raise ValidationError(f"{len(conds)} condition sets for {n_samples} samples")
    text, env, target, traj = _cond_tensors(conds, model.config, dtype, n_frames)

    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(n_samples, n_frames, model.config.frame_dim, generator=gen, dtype=dtype)
    with torch.no_grad():
        for t in range(schedule.t_steps, 0, -1):
            t_tensor = torch.full((n_samples,), t, dtype=torch.long)
            x0_hat = denoiser(x, t_tensor, text, env, target, traj)
            if t == 1:
                # posterior mean collapses to x0_hat (coefficients 1 and 0) and
                # no noise is added on the final step
                x = x0_hat
            else:
                ab_t = schedule.alpha_bar(t)
                ab_prev = schedule.alpha_bar(t - 1)
                beta = float(schedule.betas[t - 1])
                alpha = float(schedule.alphas[t - 1])
                mean = (
                    math.sqrt(ab_prev) * beta / (1.0 - ab_t) * x0_hat
                    + math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t) * x
                )
                var = (1.0 - ab_prev) / (1.0 - ab_t) * beta
                x = mean + math.sqrt(var) * torch.randn(x.shape, generator=gen, dtype=dtype)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite sampler state at step {t}")
    return x.cpu().numpy()


def ddpm_sample(model: DiffusionModel, cond: ConditionSet, n_frames: int, seed: int = 0) -> np.ndarray:
    """Single-sequence sampling; returns (n_frames, frame_dim)."""
    return ddpm_sample_batch(model, cond, n_frames, 1, seed)[0]


# ---------------------------------------------------------------------------
# text embedding


def _stable_token_index(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


def text_embed(text: str, backend: str = "hashed", dim: int = 32, table=None) -> np.ndarray:
    """Text feature L.

    "hashed": deterministic unit-normalized bag-of-words (each lowercased
    token hashed to an index); the empty string gives the zero vector.
    "file": exact lookup in a {text: vector} table (dict or JSON path).
    """
    if backend == "hashed":
        vec = np.zeros(dim)
        for token in re.findall(r"[a-z0-9]+", text.lower()):
            vec[_stable_token_index(token, dim)] += 1.0
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec
    if backend == "file":
        if table is None:
            raise ValidationError("file backend needs an embeddings table or path")
        if isinstance(table, (str, Path)):
            table = load_embedding_table(table)
        if text not in table:
            raise LookupError(f"text {text!r} not present in embeddings table")
        return np.asarray(table[text], dtype=np.float64)
    raise ValidationError(f"unknown text embedding backend {backend!r}")


def load_embedding_table(path) -> dict:
    raw = json.loads(Path(path).read_text())
    return {k: np.asarray(v, dtype=np.float64) for k, v in raw.items()}


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-2
    seed: int = 0
    pretrain: bool = False          # zero the text feature every batch
    checkpoint_every: int = 0       # 0 disables periodic checkpoints
    checkpoint_path: str | None = None


def train(model: DiffusionModel, dataset, cfg: TrainConfig):
    """Seeded AdamW training on the x0-prediction objective; returns the loss curve.

    dataset: sequence of (x0 array (N, frame_dim), ConditionSet). Sequence
    lengths may differ; each batch forwards per-length groups and averages.
    On a non-finite loss the model is restored to its last finite state and
    the run aborts (any periodic checkpoint on disk stays as written).
    """
    if cfg.checkpoint_every and not cfg.checkpoint_path:
        raise ValidationError("checkpoint_every set but no checkpoint_path given")
    items = list(dataset)
    if cfg.steps > 0 and not items:
        raise ValidationError("cannot train on an empty dataset")
    denoiser = model.denoiser
    denoiser.train()
    optimizer = torch.optim.AdamW(denoiser.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    curve = []
    last_good = None
    for step in range(cfg.steps):
        idx = torch.randint(0, len(items), (cfg.batch_size,), generator=gen).tolist()
        t_all = torch.randint(1, model.schedule.t_steps + 1, (cfg.batch_size,), generator=gen)
        by_len = {}
        for pos, i in enumerate(idx):
            by_len.setdefault(items[i][0].shape[0], []).append(pos)
        loss = None
        for n_frames in sorted(by_len):
            positions = by_len[n_frames]
            x0 = np.stack([np.asarray(items[idx[p]][0], dtype=np.float64) for p in positions])
            conds = [items[idx[p]][1] for p in positions]
            if cfg.pretrain:
                conds = [c.without_text() for c in conds]
            noise = torch.randn(x0.shape, generator=gen, dtype=denoiser.dtype)
            t_group = t_all[positions]
            part = training_loss(model, x0, t_group, conds, noise)
            weighted = part * (len(positions) / cfg.batch_size)
            loss = weighted if loss is None else loss + weighted
        if not torch.isfinite(loss):
            if last_good is not None:
                denoiser.load_state_dict(last_good)
            raise NumericError(f"non-finite loss at step {step}; restored last finite parameters")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        curve.append(float(loss.detach()))
        last_good = {k: v.detach().clone() for k, v in denoiser.state_dict().items()}
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, cfg.checkpoint_path)
    denoiser.eval()
    return curve


# ---------------------------------------------------------------------------
# checkpoints: magic + JSON header + raw float32 tensor blobs


def save_checkpoint(model: DiffusionModel, path):
    path = Path(path)
    state = model.denoiser.state_dict()
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    header = json.dumps(
        {
            "config": asdict(model.config),
            "schedule": {"t_steps": model.schedule.t_steps, "kind": model.schedule.kind},
            "mode": model.config.mode,
            "manifest": manifest,
        },
        sort_keys=True,
    ).encode()
    with path.open("wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for entry in manifest:
            tensor = state[entry["name"]]
            f.write(np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4").tobytes())


def load_checkpoint(path) -> DiffusionModel:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    (header_len,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + header_len].decode())
    config = DenoiserConfig(**header["config"])
    schedule = make_schedule(header["schedule"]["t_steps"], header["schedule"]["kind"])
    denoiser = Denoiser(config, schedule)
    cursor = 8 + header_len
    state = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        block = np.frombuffer(raw, dtype="<f4", count=count, offset=cursor).reshape(shape)
        state[entry["name"]] = torch.as_tensor(block.copy(), dtype=torch.float32)
        cursor += count * 4
    denoiser.load_state_dict(state)
    for name, param in denoiser.named_parameters():
        if not torch.isfinite(param).all():
            raise ValidationError(f"{path}: non-finite values in tensor {name!r}")
    denoiser.eval()
    return DiffusionModel(denoiser, schedule, config)

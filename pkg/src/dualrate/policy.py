"""Fast latent-conditioned policy.

Encodes a short window of recent camera frames into tokens and decodes an
action, with three independently switchable ways of injecting the planner
latent: feature-wise modulation (per-channel scale and shift), an inserted
residual cross-attention layer per block, and a prefix token in the pooling
head. All three start inert: modulation is identity, the cross-attention
output projection is zero, and the prefix projector is zero, so a freshly
initialized policy ignores the latent entirely.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict

import numpy as np

from .env import Action, Observation
from .nn import (
    LayerNorm,
    Linear,
    MapPool,
    Mlp,
    Module,
    ModuleList,
    MultiHeadAttention,
    param,
)
from .planner import Latent, PatchEmbed
from .tensor import (
    Tensor, add, clip, embed_lookup, expand, gelu, no_grad, reshape, scale_shift,
)


@dataclass(frozen=True)
class PolicyConfig:
    context_len: int = 2
    token_width: int = 32
    depth: int = 2
    heads: int = 2
    patch_size: int = 4
    image_size: int = 16
    views: str = "both"           # which camera frames feed the encoder
    latent_width: int = 64
    film: bool = True
    cross_attention: bool = True
    prefix: bool = True
    n_latent_tokens: int = 1
    action_dim: int = 2
    action_clip: float = 0.1
    mlp_ratio: int = 4
    map_hidden: int = 64
    head_hidden: int = 32

    def __post_init__(self):
        if self.context_len < 1:
            raise ValueError("context length must be >= 1")
        if self.views not in ("third", "wrist", "both"):
            raise ValueError(f"unknown view selection '{self.views}'")
        if self.n_latent_tokens < 1:
            raise ValueError("need at least one latent-derived token")

    @property
    def image_channels(self) -> int:
        return 6 if self.views == "both" else 3

    @property
    def tokens_per_frame(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def conditioned(self) -> bool:
        return self.film or self.cross_attention or self.prefix

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        return cls(**d)


def policy_frame(obs: Observation, views: str = "both") -> np.ndarray:
    """Stack the selected camera views into one [C, H, W] policy input frame."""
    if views == "third":
        return obs.third
    if views == "wrist":
        return obs.wrist
    return np.concatenate([obs.third, obs.wrist], axis=0)


class FilmLayer(Module):
    """Per-channel scale/shift of hidden features computed from the latent.

    Weights start at zero with a scale bias of one and shift bias of zero, so
    the modulation is the identity until trained.
    """

    def __init__(self, latent_width: int, width: int):
        super().__init__()
        self.scale = Linear(latent_width, width, zero_init=True)
        self.scale.bias.data[:] = 1.0
        self.shift = Linear(latent_width, width, zero_init=True)
        self.width = width

    def __call__(self, hidden: Tensor, latent: Tensor) -> Tensor:
        if latent.data.shape[-1] != self.scale.n_in:
            raise ValueError(
                f"latent width {latent.data.shape[-1]} does not match "
                f"modulation input {self.scale.n_in}"
            )
        return scale_shift(hidden, self.scale(latent), self.shift(latent))


class CrossAttnCondition(Module):
    """Residual cross-attention from hidden tokens into latent-derived tokens.

    With a single latent token the attention weight is identically 1, so the
    softmax machinery (and the query/key projections, which would otherwise
    never receive gradients) collapses to a value/output projection broadcast
    across the hidden rows. The output projection starts at zero, so the layer
    is an exact identity at initialization.
    """

    def __init__(self, latent_width: int, width: int, heads: int, n_tokens: int, rng):
        super().__init__()
        self.n_tokens = n_tokens
        self.width = width
        self.to_tokens = Linear(latent_width, n_tokens * width, rng)
        if n_tokens == 1:
            self.wv = Linear(width, width, rng)
            self.wo = Linear(width, width, rng, zero_init=True)
            self.ln = None
            self.attn = None
        else:
            self.ln = LayerNorm(width)
            self.attn = MultiHeadAttention(width, heads, rng, zero_init_out=True)

    def __call__(self, hidden: Tensor, latent: Tensor) -> Tensor:
        b, n_hidden, _ = hidden.data.shape
        toks = reshape(self.to_tokens(latent), (b, self.n_tokens, self.width))
        if self.attn is None:
            update = self.wo(expand(self.wv(toks), 1, n_hidden))
        else:
            update = self.attn(self.ln(hidden), toks)
        return add(hidden, update)


class PolicyBlock(Module):
    def __init__(self, cfg: PolicyConfig, rng):
        super().__init__()
        d = cfg.token_width
        self.film = FilmLayer(cfg.latent_width, d) if cfg.film else None
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.heads, rng)
        self.xattn = (
            CrossAttnCondition(cfg.latent_width, d, cfg.heads, cfg.n_latent_tokens, rng)
            if cfg.cross_attention else None
        )
        self.ln2 = LayerNorm(d)
        self.mlp = Mlp(d, cfg.mlp_ratio * d, rng)

    def __call__(self, x: Tensor, latent) -> Tensor:
        if self.film is not None and latent is not None:
            x = self.film(x, latent)
        x = add(x, self.attn(self.ln1(x)))
        if self.xattn is not None and latent is not None:
            x = self.xattn(x, latent)
        return add(x, self.mlp(self.ln2(x)))


class PrefixMapHead(Module):
    """Attention pooling over the visual tokens, optionally prefixed with a
    latent-derived token, then a small MLP to (displacement, gripper logit)."""

    def __init__(self, cfg: PolicyConfig, rng):
        super().__init__()
        d = cfg.token_width
        self.use_prefix = cfg.prefix
        if cfg.prefix:
            # zero-init: the prefix token is the zero vector at initialization,
            # so its key/value are latent-independent constants
            self.latent_proj = Linear(cfg.latent_width, d, zero_init=True, bias=False)
        else:
            self.latent_proj = None
        self.pool = MapPool(d, cfg.heads, d, cfg.map_hidden, rng, include_mlp=False)
        self.fc1 = Linear(d, cfg.head_hidden, rng)
        self.fc2 = Linear(cfg.head_hidden, cfg.action_dim + 1, rng)
        self.action_dim = cfg.action_dim
        self.action_clip = cfg.action_clip
        self.width = d

    def __call__(self, tokens: Tensor, latent) -> tuple[Tensor, Tensor]:
        prefix = None
        if self.use_prefix and latent is not None:
            b = tokens.data.shape[0]
            prefix = reshape(self.latent_proj(latent), (b, 1, self.width))
        pooled = self.pool(tokens, prefix=prefix)
        raw = self.fc2(gelu(self.fc1(pooled)))
        pos = clip(raw[:, : self.action_dim], -self.action_clip, self.action_clip)
        logit = raw[:, self.action_dim]
        return pos, logit


class FastPolicy(Module):
    def __init__(self, cfg: PolicyConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.token_width
        self.frame_embed = PatchEmbed(cfg.image_channels, cfg.patch_size,
                                      cfg.image_size, d, rng)
        self.frame_index = param(rng, (cfg.context_len, d), std=0.1)
        self.blocks = ModuleList([PolicyBlock(cfg, rng) for _ in range(cfg.depth)])
        self.head = PrefixMapHead(cfg, rng)

    def encode_context(self, frames: np.ndarray) -> Tensor:
        """[B, context_len, C, H, W] frames -> [B, context_len * N, width].

        Frames fold into the batch for one shared patch projection; each
        frame's tokens then pick up that frame's index embedding.
        """
        b, n_frames = frames.shape[:2]
        if n_frames != self.cfg.context_len:
            raise ValueError(
                f"expected {self.cfg.context_len} context frames, got {n_frames}"
            )
        n = self.cfg.tokens_per_frame
        d = self.cfg.token_width
        flat = frames.reshape((b * n_frames,) + frames.shape[2:])
        tokens = reshape(self.frame_embed(flat), (b, n_frames * n, d))
        idx = np.repeat(np.arange(n_frames), n)
        return add(tokens, embed_lookup(self.frame_index, idx))

    def forward(self, frames: np.ndarray, latent) -> tuple[Tensor, Tensor]:
        """Batched differentiable forward -> (displacements [B,2], logits [B])."""
        if self.cfg.conditioned and latent is None:
            raise ValueError("a conditioned policy needs a latent input")
        if not self.cfg.conditioned:
            latent = None
        x = self.encode_context(np.asarray(frames, dtype=np.float64))
        for block in self.blocks:
            x = block(x, latent)
        return self.head(x, latent)

    def act(self, context_frames: list[np.ndarray], latent: Latent | None) -> Action:
        """Deployment-path forward on one observation window."""
        frames = np.stack(context_frames)[None, ...]
        z = None
        if self.cfg.conditioned:
            if latent is None:
                raise ValueError("a conditioned policy needs a latent input")
            z = Tensor(latent.values[None, :])
        with no_grad():
            pos, logit = self.forward(frames, z)
        return Action.from_logit(pos.data[0].copy(), float(logit.data[0]))


def forward_latency(fn, trials: int = 100, warmup: int = 10) -> float:
    """Median seconds per call, warmup excluded."""
    if trials < 30:
        raise ValueError("latency measurement needs at least 30 trials")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))

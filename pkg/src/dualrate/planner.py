"""Slow multimodal planner: fuses one image and an instruction into a latent.

Pipeline: patch embedding of the image, a fusion block where learnable query
tokens self-attend together with the instruction tokens and then cross-attend
into the visual tokens, a pre-norm transformer stack over the concatenated
(fused queries, instruction embeddings), and attention pooling down to a
fixed-width latent vector. Every projection can carry a low-rank adapter so
the base weights can be frozen while the adapters train.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tokens as tok
from .nn import (
    Linear,
    LoraLinear,
    LayerNorm,
    MapPool,
    Module,
    ModuleList,
    MultiHeadAttention,
    TransformerBlock,
    batch_rows,
    param,
)
from .tensor import Tensor, add, concat, no_grad, reshape


@dataclass(frozen=True)
class PlannerConfig:
    token_width: int = 96
    patch_size: int = 2
    image_size: int = 16
    image_channels: int = 3
    n_queries: int = 4
    instruction_length: int = tok.INSTRUCTION_LENGTH
    vocab_size: int = tok.VOCAB_SIZE
    depth: int = 16
    heads: int = 4
    mlp_ratio: int = 2
    latent_width: int = 64
    map_hidden: int = 128
    lora_rank: int = 0
    lora_scaling: float = 1.0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch {self.patch_size}"
            )
        if self.token_width % self.heads != 0:
            raise ValueError(
                f"token width {self.token_width} not divisible by {self.heads} heads"
            )
        if self.depth < 1 or self.lora_rank < 0:
            raise ValueError("depth must be >= 1 and adapter rank >= 0")

    @property
    def n_visual_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PlannerConfig":
        return cls(**d)


@dataclass
class Latent:
    """Planner output plus provenance: which control step it encodes."""

    values: np.ndarray
    source_step: int
    seq: int


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, n_patches, C * patch * patch], row-major patch grid."""
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, c * patch * patch))


class PatchEmbed(Module):
    """Non-overlapping patch flattening, linear projection, learned positions."""

    def __init__(self, cfg_channels: int, patch: int, image_size: int, width: int,
                 rng, rank: int = 0):
        super().__init__()
        self.patch = patch
        self.image_size = image_size
        self.channels = cfg_channels
        n = (image_size // patch) ** 2
        self.proj = LoraLinear(cfg_channels * patch * patch, width, rng, rank=rank)
        self.pos = param(rng, (n, width), std=0.1)

    def __call__(self, images: np.ndarray, add_pos: bool = True) -> Tensor:
        b, c, h, w = images.shape
        if c != self.channels or h != self.image_size or w != self.image_size:
            raise ValueError(
                f"expected [{self.channels}, {self.image_size}, {self.image_size}] images, "
                f"got [{c}, {h}, {w}]"
            )
        patches = Tensor(extract_patches(np.asarray(images, dtype=np.float64), self.patch))
        out = self.proj(patches)
        if add_pos:
            out = add(out, self.pos)
        return out


class FusionBlock(Module):
    """Query-token fusion: self-attention over [queries || instruction], then
    residual cross-attention from the queries into the visual tokens."""

    def __init__(self, width: int, heads: int, rng, rank: int = 0):
        super().__init__()
        self.ln_self = LayerNorm(width)
        self.self_attn = MultiHeadAttention(width, heads, rng, rank=rank)
        self.ln_cross = LayerNorm(width)
        self.cross_attn = MultiHeadAttention(width, heads, rng, rank=rank)

    def __call__(self, queries: Tensor, instr: Tensor, instr_pad: np.ndarray,
                 visual: Tensor) -> Tensor:
        b, n_q, _ = queries.data.shape
        x = concat([queries, instr], axis=1)
        mask = np.concatenate(
            [np.zeros((b, n_q), dtype=bool), np.asarray(instr_pad, dtype=bool)], axis=1
        )
        x = add(x, self.self_attn(self.ln_self(x), key_mask=mask))
        q = x[:, :n_q]
        return add(q, self.cross_attn(self.ln_cross(q), visual))


class SlowPlanner(Module):
    def __init__(self, cfg: PlannerConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        r = cfg.lora_rank
        d = cfg.token_width
        self.patch_embed = PatchEmbed(cfg.image_channels, cfg.patch_size,
                                      cfg.image_size, d, rng, rank=r)
        self.instr_table = param(rng, (cfg.vocab_size, d), std=0.1)
        self.instr_pos = param(rng, (cfg.instruction_length, d), std=0.1)
        self.queries = param(rng, (cfg.n_queries, d), std=0.1)
        self.fusion = FusionBlock(d, cfg.heads, rng, rank=r)
        self.stack = ModuleList([
            TransformerBlock(d, cfg.heads, rng, mlp_ratio=cfg.mlp_ratio, rank=r)
            for _ in range(cfg.depth)
        ])
        self.pool = MapPool(d, cfg.heads, cfg.latent_width, cfg.map_hidden, rng, rank=r)
        self.encode_count = 0

    def embed_instruction(self, instr_ids: np.ndarray) -> Tensor:
        from .tensor import embed_lookup
        return add(embed_lookup(self.instr_table, instr_ids), self.instr_pos)

    def encode_batch(self, images: np.ndarray, instr_ids: np.ndarray) -> Tensor:
        """Differentiable batched forward: [B,C,H,W] images -> [B, latent]."""
        self.encode_count += 1
        b = images.shape[0]
        instr_ids = np.asarray(instr_ids)
        if instr_ids.ndim == 1:
            instr_ids = np.broadcast_to(instr_ids[None, :], (b, instr_ids.shape[0]))
        pad = tok.pad_mask(instr_ids)

        visual = self.patch_embed(images)
        instr = self.embed_instruction(instr_ids)
        queries = batch_rows(self.queries, b)
        fused = self.fusion(queries, instr, pad, visual)

        x = concat([fused, instr], axis=1)
        mask = np.concatenate(
            [np.zeros((b, self.cfg.n_queries), dtype=bool), pad], axis=1
        )
        for block in self.stack:
            x = block(x, key_mask=mask)
        return self.pool(x, key_mask=mask)

    def encode(self, image: np.ndarray, instr_ids: np.ndarray,
               source_step: int = 0, seq: int = 0) -> Latent:
        """Deployment-path forward: one observation image -> Latent."""
        with no_grad():
            out = self.encode_batch(image[None, ...], np.asarray(instr_ids)[None, :])
        return Latent(values=out.data[0].copy(), source_step=source_step, seq=seq)

    # -- parameter plumbing ----------------------------------------------------

    def freeze_base(self):
        """Adapter-training mode: only low-rank adapter weights stay trainable."""
        if self.cfg.lora_rank == 0:
            raise ValueError("adapter mode requires a positive adapter rank")
        for name, p in self.named_parameters():
            p.requires_grad = "lora_down" in name or "lora_up" in name

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

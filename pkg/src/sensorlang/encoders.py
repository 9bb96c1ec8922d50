"""Video, point-cloud and text encoders, all emitting 768-wide embeddings."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numerics import DimensionError, attention, layer_norm
from .textpipe import PromptBank, PromptedSequence, TokenSequence, assemble_prompted

EMBED_DIM = 768


class DegenerateInputError(ValueError):
    """An input carries no usable signal (e.g. every frame of a point cloud is empty)."""


@dataclass
class ModelConfig:
    width: int = 64
    heads: int = 4
    video_blocks: int = 2
    point_blocks: int = 2
    temporal_blocks: int = 1
    text_blocks: int = 2
    mlp_ratio: int = 2
    knn: int = 8
    point_budget: int = 28
    patch: int = 4
    video_size: int = 16
    frames: int = 8
    embed_dim: int = EMBED_DIM
    n_prompts: int = 16
    vocab_size: int = 2

    def to_dict(self) -> dict:
        return asdict(self)


class LayerNorm(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(width))
        self.bias = nn.Parameter(torch.zeros(width))

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise DimensionError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, mask=None):
        # x: (..., L, D); mask: (..., L) boolean over keys
        *lead, L, D = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(*lead, L, 3, h, D // h).movedim(-2, -4).unbind(-2)
        if mask is not None:
            mask = mask[..., None, None, :]
        out = attention(q, k, v, mask=mask)  # (..., h, L, dh)
        return self.proj(out.movedim(-3, -2).reshape(*lead, L, D))


class Mlp(nn.Module):
    def __init__(self, width: int, ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(width, ratio * width)
        self.fc2 = nn.Linear(ratio * width, width)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block over the second-to-last axis."""

    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.ln1 = LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads)
        self.ln2 = LayerNorm(width)
        self.mlp = Mlp(width, mlp_ratio)

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))


# ---------------------------------------------------------------------------
# video

class DividedBlock(nn.Module):
    """Spatial attention within each frame, then temporal attention per patch."""

    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.ln_s = LayerNorm(width)
        self.attn_s = MultiHeadAttention(width, heads)
        self.ln_t = LayerNorm(width)
        self.attn_t = MultiHeadAttention(width, heads)
        self.ln_m = LayerNorm(width)
        self.mlp = Mlp(width, mlp_ratio)

    def forward(self, x, temporal: bool = True):
        # x: (B, S, P, D)
        x = x + self.attn_s(self.ln_s(x))
        if temporal:
            xt = x.transpose(1, 2)
            x = x + self.attn_t(self.ln_t(xt)).transpose(1, 2)
        return x + self.mlp(self.ln_m(x))


class VideoEncoder(nn.Module):
    """Patch embedding, divided space-time blocks, mean pool, linear to 768.

    Input clips are ``(B, 3, H, W, S)``. With ``temporal=False`` the temporal
    attention and temporal position embedding are skipped, leaving a model
    that is symmetric under frame permutation.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        p, D = cfg.patch, cfg.width
        self.grid = cfg.video_size // p
        self.patch_embed = nn.Linear(3 * p * p, D)
        self.pos_space = nn.Parameter(torch.randn(self.grid * self.grid, D) * 0.02)
        self.pos_time = nn.Parameter(torch.randn(cfg.frames, D) * 0.02)
        self.blocks = nn.ModuleList(DividedBlock(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.video_blocks))
        self.norm = LayerNorm(D)
        self.head = nn.Linear(D, cfg.embed_dim)
        self.temporal = True

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        expected = (3, cfg.video_size, cfg.video_size, cfg.frames)
        if clip.dim() != 5 or tuple(clip.shape[1:]) != expected:
            raise DimensionError(f"video clip must be (B, {', '.join(map(str, expected))}), got {tuple(clip.shape)}")
        B, p, g = clip.shape[0], cfg.patch, self.grid
        x = clip.reshape(B, 3, g, p, g, p, cfg.frames).permute(0, 6, 2, 4, 1, 3, 5)
        x = self.patch_embed(x.reshape(B, cfg.frames, g * g, 3 * p * p)) + self.pos_space
        if self.temporal:
            x = x + self.pos_time[:, None, :]
        for blk in self.blocks:
            x = blk(x, self.temporal)
        return self.head(self.norm(x).mean(dim=(1, 2)))


def init_trainable_linears(module: nn.Module, std: float = 0.02, generator: torch.Generator | None = None) -> None:
    """Truncated-normal weights and zero bias for every trainable Linear layer.

    The small scale keeps early cosine similarities spread out so plain SGD
    at the default learning rate makes progress from the first epoch.
    """
    with torch.no_grad():
        for mod in module.modules():
            if isinstance(mod, nn.Linear) and mod.weight.requires_grad:
                mod.weight.copy_(nn.init.trunc_normal_(torch.empty_like(mod.weight), std=std, generator=generator))
                if mod.bias is not None:
                    mod.bias.zero_()


# ---------------------------------------------------------------------------
# point clouds

def canonical_frame(points: np.ndarray, width: int) -> np.ndarray:
    """Drop exact duplicate points and sort rows lexicographically.

    The encoder sees each frame as a set, so any within-frame reordering
    or duplication yields the identical input.
    """
    pts = np.asarray(points, dtype=np.float32).reshape(-1, width)
    if len(pts) == 0:
        return pts
    return np.unique(pts, axis=0)


def farthest_point_sample(points: np.ndarray, budget: int) -> np.ndarray:
    """Deterministic farthest-point subset of at most ``budget`` rows (xyz distance).

    Starts from row 0 of the canonical order; distance ties go to the lower
    index. The kept rows are returned in their original relative order.
    """
    n = len(points)
    if n <= budget:
        return points
    xyz = points[:, :3].astype(np.float64)
    chosen = np.zeros(budget, dtype=np.int64)
    dist = ((xyz - xyz[0]) ** 2).sum(-1)
    for i in range(1, budget):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, ((xyz - xyz[nxt]) ** 2).sum(-1))
    return points[np.sort(chosen)]


def pack_points(
    sequences: Sequence[Sequence[np.ndarray]], width: int, frames: int, budget: int = 28
) -> tuple[torch.Tensor, torch.Tensor]:
    """Canonicalize, subsample and pad point sequences into ``(B, S, budget, F)`` plus counts ``(B, S)``."""
    out = np.zeros((len(sequences), frames, budget, width), dtype=np.float32)
    counts = np.zeros((len(sequences), frames), dtype=np.int64)
    for b, seq in enumerate(sequences):
        if len(seq) != frames:
            raise DimensionError(f"point sequence has {len(seq)} frames, expected {frames}")
        for s, f in enumerate(seq):
            f = np.asarray(f, dtype=np.float32)
            if f.size and (f.ndim != 2 or f.shape[1] != width):
                raise DimensionError(f"points carry {f.shape[-1]} features, encoder expects {width}")
            f = farthest_point_sample(canonical_frame(f, width), budget)
            out[b, s, : len(f)] = f
            counts[b, s] = len(f)
    return torch.from_numpy(out), torch.from_numpy(counts)


def knn_mask(xyz: torch.Tensor, counts: torch.Tensor, k: int) -> torch.Tensor:
    """Boolean ``(G, N, N)`` mask: entry [g, i, j] is True when j is among i's k nearest.

    Only the first ``counts[g]`` points of a frame are valid; each valid point
    selects ``min(k, count)`` neighbours (itself included), ties going to the
    lower point index. Padding rows select nothing.
    """
    G, N, _ = xyz.shape
    k = min(k, N)
    d = ((xyz[:, :, None, :] - xyz[:, None, :, :]) ** 2).sum(-1)
    valid = torch.arange(N)[None, :] < counts[:, None]
    d = d.masked_fill(~valid[:, None, :], float("inf"))
    # everything strictly closer than the k-th distance, then ties in index order
    kth = torch.topk(d, k, dim=-1, largest=False, sorted=False).values.amax(-1, keepdim=True)
    closer = d < kth
    tie = d == kth
    need = k - closer.sum(-1, keepdim=True)
    mask = closer | (tie & (tie.cumsum(-1) <= need))
    return mask & valid[:, None, :] & valid[:, :, None]


class PointAttentionBlock(nn.Module):
    """Multi-head attention restricted to kNN neighbourhoods, with a relative-position term.

    Keys and values of neighbour j seen from point i are shifted by
    ``P(p_i - p_j)`` for a linear map ``P``; because ``P`` is linear the
    shift splits into per-point terms and the attention runs densely
    under the neighbourhood mask.
    """

    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.ln1 = LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.pos = nn.Linear(3, width, bias=False)
        self.proj = nn.Linear(width, width)
        self.ln2 = LayerNorm(width)
        self.mlp = Mlp(width, mlp_ratio)

    def forward(self, x, xyz, mask):
        # x: (G, N, D); xyz: (G, N, 3); mask: (G, N, N)
        G, N, D = x.shape
        h = self.heads
        split = lambda t: t.reshape(G, N, h, D // h).transpose(1, 2)
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        pe = self.pos(xyz)
        # q_i . P p_i is constant over j and cancels in the softmax
        out = attention(split(q), split(k - pe), split(v - pe), mask=mask[:, None])
        out = out.transpose(1, 2).reshape(G, N, D) + pe * mask.any(-1, keepdim=True)
        x = x + self.proj(out)
        return x + self.mlp(self.ln2(x))


class PointEncoder(nn.Module):
    """Per-point lift, local kNN attention, per-frame max pool, temporal transformer, linear to 768."""

    def __init__(self, cfg: ModelConfig, feat_width: int):
        super().__init__()
        if feat_width not in (3, 5):
            raise ValueError("point feature width must be 3 (LiDAR-like) or 5 (radar-like)")
        self.cfg = cfg
        self.feat_width = feat_width
        D = cfg.width
        self.lift = nn.Linear(feat_width, D)
        self.blocks = nn.ModuleList(PointAttentionBlock(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.point_blocks))
        self.frame_norm = LayerNorm(D)
        self.pos_time = nn.Parameter(torch.randn(cfg.frames, D) * 0.02)
        self.temporal = nn.ModuleList(Block(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.temporal_blocks))
        self.norm = LayerNorm(D)
        self.head = nn.Linear(D, cfg.embed_dim)

    def forward(self, points: torch.Tensor, counts: torch.Tensor, neighbours: torch.Tensor | None = None) -> torch.Tensor:
        """``neighbours`` is an optional precomputed ``knn_mask`` of shape ``(B, S, N, N)``."""
        if points.dim() != 4 or points.shape[-1] != self.feat_width:
            raise DimensionError(
                f"points must be (B, S, N, {self.feat_width}), got {tuple(points.shape)}"
            )
        B, S, N, Fw = points.shape
        if S != self.cfg.frames:
            raise DimensionError(f"expected {self.cfg.frames} frames, got {S}")
        empty_seq = counts.sum(dim=1) == 0
        if bool(empty_seq.any()):
            raise DegenerateInputError("point sequence has no points in any frame")
        pts = points.reshape(B * S, N, Fw)
        cnt = counts.reshape(B * S)
        xyz = pts[..., :3]
        mask = knn_mask(xyz, cnt, self.cfg.knn) if neighbours is None else neighbours.reshape(B * S, N, N)
        x = self.lift(pts)
        for blk in self.blocks:
            x = blk(x, xyz, mask)
        x = self.frame_norm(x)
        valid = (torch.arange(N)[None, :] < cnt[:, None])[..., None]
        pooled = x.masked_fill(~valid, float("-inf")).amax(dim=1)
        pooled = pooled.masked_fill((cnt == 0)[:, None], 0.0)   # empty frame -> zero token
        tokens = pooled.reshape(B, S, -1) + self.pos_time
        for blk in self.temporal:
            tokens = blk(tokens)
        return self.head(self.norm(tokens).mean(dim=1))


# ---------------------------------------------------------------------------
# text

def sinusoidal_positions(length: int, width: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    i = torch.arange(0, width, 2, dtype=torch.float32)
    angle = pos / torch.pow(10000.0, i / width)
    out = torch.zeros(length, width)
    out[:, 0::2] = torch.sin(angle)
    out[:, 1::2] = torch.cos(angle)
    return out


class TextBackbone(nn.Module):
    """Randomly initialized transformer, frozen after construction."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.width)
        nn.init.normal_(self.embed.weight, std=1.0)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.text_blocks))
        self.norm = LayerNorm(cfg.width)

    def forward(self, seq: PromptedSequence) -> torch.Tensor:
        """Masked mean of the final hidden states, ``(B, width)``."""
        rows, mask = seq.rows, seq.mask
        if rows.shape[-1] != self.embed.embedding_dim:
            raise DimensionError(
                f"prompted rows have width {rows.shape[-1]}, text encoder expects {self.embed.embedding_dim}"
            )
        x = rows + sinusoidal_positions(rows.shape[-2], rows.shape[-1])
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.norm(x)
        m = mask[..., None].to(x.dtype)
        return (x * m).sum(-2) / m.sum(-2).clamp_min(1.0)


def freeze_text_backbone(backbone: TextBackbone) -> TextBackbone:
    for p in backbone.parameters():
        p.requires_grad_(False)
    return backbone


class TextTower(nn.Module):
    """Prompt bank, frozen backbone and the trainable mapping layer G."""

    def __init__(self, cfg: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.backbone = freeze_text_backbone(TextBackbone(cfg))
        self.prompts = PromptBank(cfg.n_prompts, cfg.width, generator)
        self.mapping = nn.Linear(cfg.width, cfg.embed_dim)

    def prompted(self, seqs: TokenSequence | Sequence[TokenSequence]) -> PromptedSequence:
        return assemble_prompted(seqs, self.prompts, self.backbone.embed)

    def pooled(self, seqs: Sequence[TokenSequence]) -> torch.Tensor:
        return self.backbone(self.prompted(seqs))

    def forward(self, seqs: Sequence[TokenSequence]) -> torch.Tensor:
        return self.mapping(self.pooled(seqs))


def encode_video(clip: torch.Tensor, encoder: VideoEncoder) -> torch.Tensor:
    """Single ``(3, H, W, S)`` clip or a batch; returns ``(768,)`` or ``(B, 768)``."""
    if clip.dim() == 4:
        return encoder(clip[None])[0]
    return encoder(clip)


def encode_points(seq: Sequence[np.ndarray], encoder: PointEncoder) -> torch.Tensor:
    """One variable-size point sequence (list of per-frame arrays) to a ``(768,)`` embedding."""
    pts, counts = pack_points([seq], encoder.feat_width, encoder.cfg.frames, encoder.cfg.point_budget)
    return encoder(pts, counts)[0]


def encode_text(seq: PromptedSequence, tower: TextTower) -> torch.Tensor:
    single = seq.rows.dim() == 2
    if single:
        seq = PromptedSequence(seq.rows[None], seq.mask[None])
    out = tower.mapping(tower.backbone(seq))
    return out[0] if single else out

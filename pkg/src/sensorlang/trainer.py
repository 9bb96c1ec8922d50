"""Model assembly, SGDM optimization, step-wise learning-rate schedule and epoch loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .alignment import LossConfig, info_nce, joint_loss, similarity
from .encoders import ModelConfig, PointEncoder, TextTower, VideoEncoder, init_trainable_linears, knn_mask, pack_points
from .synthdata import Dataset
from .textpipe import ClassRegistry, ConfigurationError, Vocabulary, zero_shot_tokens

log = logging.getLogger(__name__)

MODALITIES = ("video", "lidar", "radar")
POINT_WIDTH = {"lidar": 3, "radar": 5}


class NumericError(FloatingPointError):
    """A non-finite gradient or loss was produced during training."""


@dataclass
class TrainConfig:
    batch_size: int = 10
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 50
    lr_steps: tuple[int, ...] = (20, 30, 40)
    lr_decay: float = 0.1
    seed: int = 0
    joint: bool = True
    description: bool = True
    soft_prompt: bool = True
    n_prompts: int = 16
    mode: str = "aligned"            # aligned | vanilla
    modalities: tuple[str, ...] = MODALITIES
    zero_shot_text: str = "name_desc"

    def __post_init__(self):
        self.lr_steps = tuple(int(e) for e in self.lr_steps)
        self.modalities = tuple(self.modalities)
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        if self.mode not in ("aligned", "vanilla"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        bad = [m for m in self.modalities if m not in MODALITIES]
        if bad or not self.modalities:
            raise ConfigurationError(f"modalities must be a non-empty subset of {MODALITIES}, got {self.modalities}")
        if self.zero_shot_text not in ("name_desc", "name_name"):
            raise ConfigurationError(f"unknown zero_shot_text {self.zero_shot_text!r}")

    @property
    def prompt_count(self) -> int:
        return self.n_prompts if self.soft_prompt else 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_steps"] = list(self.lr_steps)
        d["modalities"] = list(self.modalities)
        return d


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Base rate decayed once per boundary in ``lr_steps`` already reached (0-based epochs)."""
    crossed = sum(1 for s in cfg.lr_steps if s <= epoch)
    return cfg.lr * cfg.lr_decay ** crossed


def sgdm_step(
    params: Sequence[tuple[str, torch.Tensor]],
    buffers: dict[str, torch.Tensor],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In-place SGD with momentum and L2 weight decay.

    ``buffer <- momentum * buffer + (grad + weight_decay * param)``;
    ``param <- param - lr * buffer``. Tensors without ``requires_grad`` are skipped.
    """
    live = [(n, p) for n, p in params if p.requires_grad and p.grad is not None]
    if not live:
        return
    grads = [p.grad for _, p in live]
    if not bool(torch.stack(torch._foreach_norm(grads)).isfinite().all()):
        bad = next(n for n, p in live if not torch.isfinite(p.grad).all())
        raise NumericError(f"non-finite gradient in tensor {bad!r}")
    with torch.no_grad():
        for name, p in live:
            if name not in buffers:
                buffers[name] = torch.zeros_like(p)
        tensors = [p for _, p in live]
        bufs = [buffers[n] for n, _ in live]
        d = torch._foreach_add(grads, tensors, alpha=weight_decay)
        torch._foreach_mul_(bufs, momentum)
        torch._foreach_add_(bufs, d)
        torch._foreach_add_(tensors, bufs, alpha=-lr)


# ---------------------------------------------------------------------------
# models

class SensorLanguageModel(nn.Module):
    """Encoders for one or more modalities plus either a text tower or a one-hot head."""

    def __init__(
        self,
        model_cfg: ModelConfig,
        modalities: Sequence[str],
        registry: ClassRegistry,
        vocab: Vocabulary,
        *,
        mode: str = "aligned",
        description: bool = True,
        zero_shot_text: str = "name_desc",
        seed: int = 0,
    ):
        super().__init__()
        self.cfg = model_cfg
        self.modalities = tuple(modalities)
        self.registry = registry
        self.vocab = vocab
        self.mode = mode
        self.description = description
        self.zero_shot_text = zero_shot_text
        torch.manual_seed(seed)
        encoders = {}
        for m in self.modalities:
            encoders[m] = VideoEncoder(model_cfg) if m == "video" else PointEncoder(model_cfg, POINT_WIDTH[m])
        self.encoders = nn.ModuleDict(encoders)
        if mode == "aligned":
            self.text = TextTower(model_cfg)
            self.heads = None
        else:
            self.text = None
            k = len(registry.seen)
            self.heads = nn.ModuleDict({m: nn.Linear(model_cfg.embed_dim, k) for m in self.modalities})
        init_trainable_linears(self, generator=torch.Generator().manual_seed(seed))
        self._pooled_cache: dict[str, torch.Tensor] = {}

    def encode(self, modality: str, inputs) -> torch.Tensor:
        if modality not in self.encoders:
            raise ConfigurationError(f"model has no {modality} encoder (has {list(self.encoders)})")
        enc = self.encoders[modality]
        if modality == "video":
            return enc(inputs)
        return enc(*inputs)

    def class_tokens(self, label_space: str, training: bool = False):
        # training uses name (+ description); evaluation follows the zero-shot text rule
        rule = "name_desc" if training else self.zero_shot_text
        return zero_shot_tokens(
            self.registry, self.vocab, label_space=label_space,
            zero_shot_text=rule, use_description=self.description,
        )

    def text_embeddings(self, label_space: str = "seen", training: bool = False) -> tuple[list[int], torch.Tensor]:
        if self.text is None:
            raise ConfigurationError("vanilla model has no text pathway")
        ids, seqs = self.class_tokens(label_space, training)
        if self.text.prompts.n == 0:
            # frozen backbone with no prompts: pooled features never change
            key = f"{label_space}/{training}"
            if key not in self._pooled_cache:
                with torch.no_grad():
                    self._pooled_cache[key] = self.text.pooled(seqs)
            return ids, self.text.mapping(self._pooled_cache[key])
        return ids, self.text(seqs)

    def trainable(self) -> list[tuple[str, torch.Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]


class ModelBundle:
    """Either one jointly trained model (member ``"joint"``) or one model per modality."""

    def __init__(self, members: dict[str, SensorLanguageModel], train_cfg: TrainConfig,
                 loss_cfg: LossConfig, model_cfg: ModelConfig):
        self.members = members
        self.train_cfg = train_cfg
        self.loss_cfg = loss_cfg
        self.model_cfg = model_cfg
        self.buffers: dict[str, dict[str, torch.Tensor]] = {k: {} for k in members}
        self.epoch = 0

    @property
    def registry(self) -> ClassRegistry:
        return next(iter(self.members.values())).registry

    @property
    def vocab(self) -> Vocabulary:
        return next(iter(self.members.values())).vocab

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for member in self.members.values() for m in member.modalities)

    def member_for(self, modality: str) -> SensorLanguageModel:
        for model in self.members.values():
            if modality in model.modalities:
                return model
        raise ConfigurationError(f"no trained encoder for modality {modality!r}")

    def named_tensors(self) -> list[tuple[str, torch.Tensor]]:
        out = []
        for key, model in self.members.items():
            out += [(f"{key}/{n}", p) for n, p in model.named_parameters()]
        return out


def build_bundle(
    registry: ClassRegistry,
    vocab: Vocabulary,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    model_cfg: ModelConfig | None = None,
) -> ModelBundle:
    loss_cfg = loss_cfg or LossConfig()
    model_cfg = model_cfg or ModelConfig()
    model_cfg.vocab_size = len(vocab)
    model_cfg.n_prompts = train_cfg.prompt_count
    kw = dict(
        mode=train_cfg.mode, description=train_cfg.description,
        zero_shot_text=train_cfg.zero_shot_text,
    )
    # one-hot baselines are trained per modality, like separate runs
    if train_cfg.joint and train_cfg.mode == "aligned":
        members = {"joint": SensorLanguageModel(model_cfg, train_cfg.modalities, registry, vocab,
                                                seed=train_cfg.seed, **kw)}
    else:
        members = {
            m: SensorLanguageModel(model_cfg, (m,), registry, vocab, seed=train_cfg.seed + 1000 * (i + 1), **kw)
            for i, m in enumerate(train_cfg.modalities)
        }
    return ModelBundle(members, train_cfg, loss_cfg, model_cfg)


# ---------------------------------------------------------------------------
# batches

@dataclass
class PackedSplit:
    """A dataset subset held as dense tensors; point clouds are canonicalized and padded.

    Point entries are ``(points, counts, neighbours)``: the kNN masks depend on
    the inputs alone, so they are computed once here instead of every step.
    """

    labels: torch.Tensor
    subjects: torch.Tensor
    environments: torch.Tensor
    video: torch.Tensor
    lidar: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    radar: tuple[torch.Tensor, torch.Tensor, torch.Tensor]

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @classmethod
    def from_dataset(
        cls, dataset: Dataset, indices: Sequence[int] | None = None, budget: int = 28, knn: int = 8
    ) -> "PackedSplit":
        samples = dataset.samples if indices is None else [dataset.samples[i] for i in indices]
        S = dataset.config.frames
        size = dataset.config.video_size
        video = (torch.from_numpy(np.stack([s.video for s in samples])) if samples
                 else torch.zeros(0, 3, size, size, S))
        return cls(
            labels=torch.tensor([s.class_id for s in samples], dtype=torch.long),
            subjects=torch.tensor([s.subject for s in samples], dtype=torch.long),
            environments=torch.tensor([s.environment for s in samples], dtype=torch.long),
            video=video,
            lidar=_with_neighbours(pack_points([s.lidar for s in samples], 3, S, budget), knn),
            radar=_with_neighbours(pack_points([s.radar for s in samples], 5, S, budget), knn),
        )

    def inputs(self, modality: str, idx: torch.Tensor):
        if modality == "video":
            return self.video[idx]
        pts, counts, nbr = self.lidar if modality == "lidar" else self.radar
        return pts[idx], counts[idx], nbr[idx]


def _with_neighbours(packed, knn):
    pts, counts = packed
    B, S, N, _ = pts.shape
    masks = [knn_mask(pts[i:i + 64, ..., :3].reshape(-1, N, 3), counts[i:i + 64].reshape(-1), knn)
             for i in range(0, B, 64)]
    nbr = torch.cat(masks).reshape(B, S, N, N) if masks else torch.zeros(0, S, N, N, dtype=torch.bool)
    return pts, counts, nbr


def batches(n: int, batch_size: int, seed: int, epoch: int, stream: int = 0) -> Iterable[torch.Tensor]:
    """One seeded permutation per epoch; the last short batch is kept."""
    perm = np.random.default_rng([seed, epoch, stream]).permutation(n)
    for start in range(0, n, batch_size):
        yield torch.from_numpy(perm[start:start + batch_size])


# ---------------------------------------------------------------------------
# epochs

@dataclass
class EpochStats:
    epoch: int
    lr: float
    joint: float
    per_modality: dict[str, float] = field(default_factory=dict)


def _member_step(key, model, data, idx, cols, bundle, lr) -> dict[str, float]:
    cfg, loss_cfg = bundle.train_cfg, bundle.loss_cfg
    losses = {}
    if model.mode == "aligned":
        _, text = model.text_embeddings("seen", training=True)
        for m in model.modalities:
            sim = similarity(model.encode(m, data.inputs(m, idx)), text, loss_cfg)
            losses[m] = info_nce(sim, cols, loss_cfg)
    else:
        for m in model.modalities:
            logits = model.heads[m](model.encode(m, data.inputs(m, idx)))
            losses[m] = F.cross_entropy(logits, cols)
    if len(losses) == 3 and key == "joint":
        total = joint_loss(losses["video"], losses["lidar"], losses["radar"], loss_cfg)
    elif key == "joint":
        total = sum(loss_cfg.weight(m) * v for m, v in losses.items())
    else:
        (total,) = losses.values()
    if not torch.isfinite(total):
        raise NumericError(f"non-finite loss in member {key!r}: {total.item()}")
    model.zero_grad(set_to_none=True)
    total.backward()
    sgdm_step(model.trainable(), bundle.buffers[key], lr, cfg.momentum, cfg.weight_decay)
    out = {m: float(v.detach()) for m, v in losses.items()}
    out["total"] = float(total.detach())
    return out


def train_epoch(bundle: ModelBundle, data: PackedSplit) -> EpochStats:
    """One pass over ``data`` (seen classes only) for every bundle member."""
    cfg = bundle.train_cfg
    if len(data) == 0:
        raise ConfigurationError("training split is empty")
    registry = bundle.registry
    col_of = {cid: i for i, cid in enumerate(registry.seen_ids)}
    bad = sorted({int(c) for c in data.labels} - set(col_of))
    if bad:
        raise ConfigurationError(f"training split contains unseen class ids {bad}")
    cols_all = torch.tensor([col_of[int(c)] for c in data.labels], dtype=torch.long)

    epoch = bundle.epoch
    lr = lr_schedule(epoch, cfg)
    per_mod: dict[str, list[float]] = {}
    totals: list[float] = []
    for stream, (key, model) in enumerate(bundle.members.items()):
        model.train()
        member_totals = []
        for idx in batches(len(data), cfg.batch_size, cfg.seed, epoch, stream):
            out = _member_step(key, model, data, idx, cols_all[idx], bundle, lr)
            member_totals.append(out.pop("total"))
            for m, v in out.items():
                per_mod.setdefault(m, []).append(v)
        totals.append(float(np.mean(member_totals)))
    bundle.epoch += 1
    stats = EpochStats(
        epoch=epoch, lr=lr, joint=float(np.sum(totals)) if len(totals) > 1 else totals[0],
        per_modality={m: float(np.mean(v)) for m, v in per_mod.items()},
    )
    log.info("epoch %d lr %.0e loss %.4f %s", epoch, lr, stats.joint, stats.per_modality)
    return stats


def train(bundle: ModelBundle, data: PackedSplit, epochs: int | None = None, callback=None) -> list[EpochStats]:
    history = []
    for _ in range(bundle.train_cfg.epochs if epochs is None else epochs):
        stats = train_epoch(bundle, data)
        history.append(stats)
        if callback is not None:
            callback(stats)
    return history

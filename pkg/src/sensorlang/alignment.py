"""Sensor-text similarity, per-modality InfoNCE and the weighted joint objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .numerics import DimensionError, l2_normalize, logsumexp, matmul


@dataclass
class LossConfig:
    tau: float = 0.07
    alpha: float = 0.4   # video
    beta: float = 1.3    # LiDAR-like
    gamma: float = 1.3   # radar-like
    normalize: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        weights = (self.alpha, self.beta, self.gamma)
        if min(weights) < 0 or max(weights) <= 0:
            raise ValueError(f"modality weights must be non-negative with one positive, got {weights}")

    def weight(self, modality: str) -> float:
        return {"video": self.alpha, "lidar": self.beta, "radar": self.gamma}[modality]

    def to_dict(self) -> dict:
        return asdict(self)


def similarity(sensor: torch.Tensor, text: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """``(batch, classes)`` dot products, cosine when ``cfg.normalize``."""
    if sensor.shape[-1] != text.shape[-1]:
        raise DimensionError(
            f"embedding widths differ: sensor {tuple(sensor.shape)} vs text {tuple(text.shape)}"
        )
    if cfg.normalize:
        sensor = l2_normalize(sensor, -1).values
        text = l2_normalize(text, -1).values
    return matmul(sensor, text.transpose(-1, -2))


def info_nce(sim: torch.Tensor, labels: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Mean over rows of ``-log softmax(sim / tau)[label]``.

    ``labels`` index columns of ``sim``; the denominator runs over every
    column (the positive and all negative class texts).
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != sim.shape[:1]:
        raise DimensionError(f"{labels.shape[0] if labels.dim() else 0} labels for {sim.shape[0]} rows")
    if labels.numel() and (labels.min() < 0 or labels.max() >= sim.shape[1]):
        raise IndexError(f"label out of range for {sim.shape[1]} classes: {labels.tolist()}")
    logits = sim / cfg.tau
    positive = logits.gather(1, labels[:, None]).squeeze(1)
    return (logsumexp(logits, 1) - positive).mean()


def joint_loss(l_vt: torch.Tensor, l_lt: torch.Tensor, l_rt: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    return cfg.alpha * l_vt + cfg.beta * l_lt + cfg.gamma * l_rt

"""Zero-shot prediction over class texts, evaluation reports and embedding dumps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .numerics import l2_normalize
from .textpipe import ConfigurationError
from .trainer import MODALITIES, ModelBundle, PackedSplit, SensorLanguageModel

LABEL_SPACES = ("seen", "full")


class ContractError(ValueError):
    """The requested modality or label space cannot be served by the model."""


def _member(model: SensorLanguageModel | ModelBundle, modality: str) -> SensorLanguageModel:
    if modality not in MODALITIES:
        raise ContractError(f"unknown modality {modality!r}")
    if isinstance(model, ModelBundle):
        try:
            return model.member_for(modality)
        except ConfigurationError as exc:
            raise ContractError(str(exc)) from None
    if modality not in model.modalities:
        raise ContractError(f"model has no {modality} encoder (has {list(model.modalities)})")
    return model


@dataclass(frozen=True)
class Prediction:
    class_id: int
    ranking: tuple[tuple[int, float], ...]   # (class id, score), best first

    def top(self, k: int) -> tuple[tuple[int, float], ...]:
        return self.ranking[:k]


class Scorer:
    """Scores sensor inputs of one modality against a fixed label space.

    Aligned models score by cosine similarity with the class-text
    embeddings; one-hot models score with their classifier head, whose
    label space is the seen classes whatever ``label_space`` says.
    """

    def __init__(self, model: SensorLanguageModel | ModelBundle, modality: str, label_space: str = "full"):
        if label_space not in LABEL_SPACES:
            raise ContractError(f"label space must be one of {LABEL_SPACES}, got {label_space!r}")
        self.modality = modality
        self.label_space = label_space
        self.model = _member(model, modality)
        self.registry = self.model.registry
        with torch.no_grad():
            if self.model.text is not None:
                ids, text = self.model.text_embeddings(label_space)
                self.text = l2_normalize(text, -1).values
            else:
                ids, self.text = list(self.registry.seen_ids), None
        self.class_ids = torch.tensor(ids, dtype=torch.long)

    def embed(self, inputs) -> torch.Tensor:
        self.model.eval()
        with torch.no_grad():
            return self.model.encode(self.modality, inputs)

    def scores(self, embeddings: torch.Tensor) -> torch.Tensor:
        """``(batch, classes)`` scores; columns follow ``class_ids`` (ascending)."""
        with torch.no_grad():
            if self.text is None:
                return self.model.heads[self.modality](embeddings)
            return l2_normalize(embeddings, -1).values @ self.text.T

    def predict_ids(self, scores: torch.Tensor) -> torch.Tensor:
        # argmax returns the first maximal column, i.e. the lowest class id on ties
        return self.class_ids[scores.argmax(dim=1)]

    def rankings(self, scores: torch.Tensor) -> list[Prediction]:
        order = torch.sort(scores, dim=1, descending=True, stable=True).indices
        out = []
        for row, idx in zip(scores, order):
            ranking = tuple((int(self.class_ids[i]), float(row[i])) for i in idx)
            out.append(Prediction(ranking[0][0], ranking))
        return out


def predict(
    model: SensorLanguageModel | ModelBundle,
    modality: str,
    inputs,
    label_space: str = "full",
) -> list[Prediction]:
    """Rank every class of ``label_space`` for each input of a batch.

    ``inputs`` is a ``(B, 3, H, W, S)`` clip batch for video or a
    ``(points, counts)`` pair for the point modalities.
    """
    scorer = Scorer(model, modality, label_space)
    return scorer.rankings(scorer.scores(scorer.embed(inputs)))


def _unseen_tag(position: int) -> str:
    return f"Z{position + 1:02d}"


@dataclass
class EvalReport:
    modality: str
    split: str
    label_space: str
    seen_accuracy: dict[int, float]
    unseen_accuracy: dict[int, float]
    seen_top1: float
    unseen_avg: float | None
    confusion: np.ndarray                       # (classes, classes): rows true, columns predicted
    class_names: dict[int, str] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "modality": self.modality,
            "split": self.split,
            "label_space": self.label_space,
            "seen_top1": self.seen_top1,
            "unseen_avg": self.unseen_avg,
            "seen_accuracy": {str(k): v for k, v in self.seen_accuracy.items()},
            "unseen_accuracy": {str(k): v for k, v in self.unseen_accuracy.items()},
            "counts": {str(k): v for k, v in self.counts.items()},
            "class_names": {str(k): v for k, v in self.class_names.items()},
            "confusion": self.confusion.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        ints = lambda m, f: {int(k): f(v) for k, v in m.items()}
        return cls(
            modality=d["modality"], split=d["split"], label_space=d["label_space"],
            seen_accuracy=ints(d["seen_accuracy"], float), unseen_accuracy=ints(d["unseen_accuracy"], float),
            seen_top1=float(d["seen_top1"]),
            unseen_avg=None if d["unseen_avg"] is None else float(d["unseen_avg"]),
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            class_names=ints(d["class_names"], str), counts=ints(d["counts"], int),
        )

    def table(self) -> str:
        """Aligned text table: seen accuracy, one column per unseen class, then their average."""
        head = ["modality", "split", "labels", "seen"]
        row = [self.modality, self.split, self.label_space, f"{100 * self.seen_top1:.1f}"]
        for pos, cid in enumerate(sorted(self.unseen_accuracy)):
            head.append(_unseen_tag(pos))
            row.append(f"{100 * self.unseen_accuracy[cid]:.1f}")
        if self.unseen_avg is not None:
            head.append("Avg")
            row.append(f"{100 * self.unseen_avg:.1f}")
        widths = [max(len(a), len(b)) for a, b in zip(head, row)]
        lines = ["  ".join(h.rjust(w) for h, w in zip(head, widths)),
                 "  ".join(r.rjust(w) for r, w in zip(row, widths))]
        if self.unseen_accuracy:
            lines.append("")
            for pos, cid in enumerate(sorted(self.unseen_accuracy)):
                lines.append(f"{_unseen_tag(pos)} = {self.class_names.get(cid, cid)}")
        return "\n".join(lines) + "\n"


def evaluate(
    model: SensorLanguageModel | ModelBundle,
    data: PackedSplit,
    modality: str,
    label_space: str = "full",
    split: str = "random",
    batch_size: int = 50,
) -> EvalReport:
    """Top-1 accuracy per class plus the confusion matrix over the whole registry.

    Unseen columns appear exactly when the split holds unseen-class
    samples; their average is unweighted over those classes.
    """
    if len(data) == 0:
        raise ConfigurationError("evaluation split is empty")
    scorer = Scorer(model, modality, label_space)
    registry = scorer.registry
    K = len(registry)
    preds = []
    for start in range(0, len(data), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(data)))
        preds.append(scorer.predict_ids(scorer.scores(scorer.embed(data.inputs(modality, idx)))))
    pred = torch.cat(preds).numpy()
    true = data.labels.numpy()
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)

    counts = confusion.sum(axis=1)
    present = [int(c) for c in np.flatnonzero(counts)]
    acc = {c: float(confusion[c, c] / counts[c]) for c in present}
    seen_ids = set(registry.seen_ids)
    seen_acc = {c: a for c, a in acc.items() if c in seen_ids}
    unseen_acc = {c: a for c, a in acc.items() if c not in seen_ids}
    seen_rows = [c for c in present if c in seen_ids]
    n_seen = int(counts[seen_rows].sum())
    seen_top1 = float(sum(confusion[c, c] for c in seen_rows) / n_seen) if n_seen else 0.0
    unseen_avg = float(np.mean(list(unseen_acc.values()))) if unseen_acc else None
    return EvalReport(
        modality=modality, split=split, label_space=label_space,
        seen_accuracy=seen_acc, unseen_accuracy=unseen_acc,
        seen_top1=seen_top1, unseen_avg=unseen_avg, confusion=confusion,
        class_names={e.class_id: e.name for e in registry}, counts={c: int(counts[c]) for c in present},
    )


# ---------------------------------------------------------------------------
# embedding dumps

def principal_directions(x: np.ndarray, k: int = 2, seed: int = 0, iters: int = 500, tol: float = 1e-12) -> np.ndarray:
    """Top-``k`` principal directions of ``x`` (rows are samples) by power iteration with deflation.

    Each direction's sign is fixed so its largest-magnitude entry is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred
    rng = np.random.default_rng(seed)
    dirs = []
    for _ in range(k):
        v = rng.standard_normal(cov.shape[0])
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = cov @ v
            for d in dirs:
                w -= (w @ d) * d
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            w /= norm
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        v = v * np.sign(v[np.argmax(np.abs(v))])
        dirs.append(v)
    return np.stack(dirs)


def dump_embeddings(
    model: ModelBundle | SensorLanguageModel,
    data: PackedSplit,
    path: str | Path,
    modalities: Sequence[str] | None = None,
    seed: int = 0,
    batch_size: int = 50,
) -> Path:
    """Write one row per (sample, modality) and per class text.

    Columns: ``kind, class_id, pc1, pc2, e0 … e767``. ``kind`` is the
    modality or ``text``; ``pc1``/``pc2`` project the unit-normalized
    embedding on the top-2 principal directions of all rows.
    """
    if isinstance(model, ModelBundle):
        members = [(m, model.member_for(m)) for m in (modalities or model.modalities)]
    else:
        members = [(m, model) for m in (modalities or model.modalities)]
    kinds: list[str] = []
    ids: list[int] = []
    rows: list[np.ndarray] = []
    text_done = set()
    for modality, member in members:
        scorer = Scorer(member, modality, "full")
        for start in range(0, len(data), batch_size):
            idx = torch.arange(start, min(start + batch_size, len(data)))
            emb = scorer.embed(data.inputs(modality, idx))
            rows.append(emb.numpy())
            kinds += [modality] * len(idx)
            ids += data.labels[idx].tolist()
        if member.text is not None and id(member) not in text_done:
            text_done.add(id(member))
            with torch.no_grad():
                cids, text = member.text_embeddings("full")
            rows.append(text.numpy())
            kinds += ["text"] * len(cids)
            ids += list(cids)
    table = np.concatenate(rows) if rows else np.zeros((0, 0), dtype=np.float32)
    unit = table / np.sqrt((table.astype(np.float64) ** 2).sum(1, keepdims=True) + 1e-12)
    proj = unit @ principal_directions(unit, 2, seed).T if len(table) > 1 else np.zeros((len(table), 2))

    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "class_id", "pc1", "pc2"] + [f"e{i}" for i in range(table.shape[1])])
            for kind, cid, p, e in zip(kinds, ids, proj, table):
                w.writerow([kind, cid, f"{p[0]:.9g}", f"{p[1]:.9g}"] + [f"{v:.9g}" for v in e])
    except OSError as exc:
        raise FileNotFoundError(f"cannot write embedding table {path}: {exc}") from exc
    return path

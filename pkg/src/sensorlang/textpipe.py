"""Class registry, word tokenizer, learnable prompts and prompted-sequence assembly."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import nn

from .numerics import DimensionError

PAD_ID = 0
UNK_ID = 1
MAX_TEXT_LEN = 32
PROMPT_INIT_STD = 0.02

_WORD = re.compile(r"[a-z0-9]+")

REGISTRY_FIELDS = ("class_id", "name", "description", "seen")


class ConfigurationError(ValueError):
    pass


class RegistryError(ValueError):
    """Raised when a class registry file fails validation."""


@dataclass(frozen=True)
class ClassEntry:
    class_id: int
    name: str
    description: str
    seen: bool


class ClassRegistry:
    """Ordered set of activity classes; ids are dense in ``[0, k_s + k_u)``."""

    def __init__(self, entries: Iterable[ClassEntry]):
        self.entries = sorted(entries, key=lambda e: e.class_id)
        ids = [e.class_id for e in self.entries]
        if ids != list(range(len(ids))):
            raise RegistryError(f"class ids must be dense from 0, got {ids}")
        for e in self.entries:
            if not e.name.strip():
                raise RegistryError(f"class {e.class_id} has an empty name")
            if not e.description.strip():
                raise RegistryError(f"class {e.class_id} has an empty description")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise RegistryError("class names must be unique")

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, class_id: int) -> ClassEntry:
        return self.entries[class_id]

    def __iter__(self):
        return iter(self.entries)

    @property
    def seen(self) -> list[ClassEntry]:
        return [e for e in self.entries if e.seen]

    @property
    def unseen(self) -> list[ClassEntry]:
        return [e for e in self.entries if not e.seen]

    @property
    def seen_ids(self) -> list[int]:
        return [e.class_id for e in self.seen]

    @property
    def unseen_ids(self) -> list[int]:
        return [e.class_id for e in self.unseen]

    def by_name(self, name: str) -> ClassEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def to_json(self) -> str:
        return json.dumps({"classes": [asdict(e) for e in self.entries]}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ClassRegistry":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise RegistryError(f"registry is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or not isinstance(doc.get("classes"), list):
            raise RegistryError("registry must be an object with a 'classes' list")
        entries = []
        for i, item in enumerate(doc["classes"]):
            if not isinstance(item, dict) or set(item) != set(REGISTRY_FIELDS):
                raise RegistryError(
                    f"registry entry {i} must have exactly the fields {REGISTRY_FIELDS}"
                )
            if not isinstance(item["class_id"], int) or not isinstance(item["seen"], bool):
                raise RegistryError(f"registry entry {i}: class_id must be int, seen bool")
            if not isinstance(item["name"], str) or not isinstance(item["description"], str):
                raise RegistryError(f"registry entry {i}: name/description must be text")
            entries.append(ClassEntry(**item))
        return cls(entries)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ClassRegistry":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class Vocabulary:
    """Lowercase word vocabulary. Id 0 is padding, id 1 unknown, words start at 2."""

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        for t in tokens:
            if words(t) != [t]:
                raise ValueError(f"vocabulary token {t!r} is not a single lowercase word")
        self.tokens = list(tokens)
        self._ids = {t: i + 2 for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens) + 2

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        seen: dict[str, None] = {}
        for text in texts:
            for w in words(text):
                seen.setdefault(w, None)
        return cls(list(seen))

    @classmethod
    def from_registry(cls, registry: ClassRegistry) -> "Vocabulary":
        texts = []
        for e in registry:
            texts += [e.name, e.description]
        return cls.from_texts(texts)

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self.tokens)

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        return cls([line for line in text.splitlines() if line])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.ids)

    def padded(self, width: int) -> list[int]:
        return list(self.ids) + [PAD_ID] * (width - len(self.ids))


def tokenize(text: str, vocab: Vocabulary, max_len: int = MAX_TEXT_LEN) -> TokenSequence:
    return TokenSequence(tuple(vocab.id(w) for w in words(text))[:max_len])


def assemble_token(
    entry: ClassEntry,
    vocab: Vocabulary,
    *,
    use_description: bool = True,
    second: str = "description",
    max_len: int = MAX_TEXT_LEN,
) -> TokenSequence:
    """Name tokens followed by description tokens, truncated to ``max_len``.

    ``second="name"`` repeats the name instead of the description (the
    alternative reading of the zero-shot token rule).
    """
    head = tokenize(entry.name, vocab, max_len).ids
    tail: tuple[int, ...] = ()
    if use_description:
        if second == "description":
            tail = tokenize(entry.description, vocab, max_len).ids
        elif second == "name":
            tail = head
        else:
            raise ConfigurationError(f"unknown second text part {second!r}")
    ids = (head + tail)[:max_len]
    if not ids:
        raise ConfigurationError(f"class {entry.class_id} assembles to an empty token sequence")
    return TokenSequence(ids)


class PromptBank(nn.Module):
    """``2n`` shared context vectors living in token-embedding space."""

    def __init__(self, n: int, width: int, generator: torch.Generator | None = None):
        super().__init__()
        if n < 0:
            raise ConfigurationError("prompt half-count must be non-negative")
        self.n = n
        self.width = width
        init = torch.randn(2 * n, width, generator=generator) * PROMPT_INIT_STD
        self.vectors = nn.Parameter(init)

    @property
    def head(self) -> torch.Tensor:
        return self.vectors[: self.n]

    @property
    def tail(self) -> torch.Tensor:
        return self.vectors[self.n :]


@dataclass
class PromptedSequence:
    """Embedded rows ``p_1..p_n, E(t), p_{n+1}..p_{2n}`` plus a validity mask.

    Batched form: ``rows`` is ``(B, L, W)`` and ``mask`` ``(B, L)``; padding
    trails each row after the closing prompt block.
    """

    rows: torch.Tensor
    mask: torch.Tensor


def assemble_prompted(
    seqs: TokenSequence | Sequence[TokenSequence],
    bank: PromptBank,
    embed: nn.Embedding,
) -> PromptedSequence:
    single = isinstance(seqs, TokenSequence)
    batch = [seqs] if single else list(seqs)
    if bank.width != embed.embedding_dim:
        raise DimensionError(
            f"prompt width {bank.width} does not match token embedding width {embed.embedding_dim}"
        )
    n = bank.n
    lengths = [s.length for s in batch]
    width = max(lengths) if lengths else 0
    total = 2 * n + width
    ids = torch.tensor([s.padded(width) for s in batch], dtype=torch.long).reshape(len(batch), width)
    tok = embed(ids)  # (B, width, W)
    B, W = len(batch), bank.width

    head = bank.head.unsqueeze(0).expand(B, n, W)
    tail = bank.tail.unsqueeze(0).expand(B, n, W)
    lens = torch.tensor(lengths, dtype=torch.long).reshape(B, 1)
    pos = torch.arange(total).reshape(1, total)
    mask = pos < 2 * n + lens
    tok = tok * (torch.arange(width).reshape(1, width) < lens)[..., None]
    stacked = torch.cat([head, tok, tail], dim=1)
    if all(L == width for L in lengths):
        rows = stacked
    else:
        # Tail prompts must follow each row's own last token: gather them in after the
        # tokens and move the zeroed padding slots to the end.
        j = pos - n - lens                                   # offset into the tail block
        src = torch.where(pos < n + lens, pos,
              torch.where(j < n, n + width + j, pos - n))
        rows = stacked.gather(1, src[..., None].expand(B, total, W))
    if single:
        return PromptedSequence(rows[0], mask[0])
    return PromptedSequence(rows, mask)


def shipped_registry() -> ClassRegistry:
    """The 27-class registry bundled with the package."""
    return ClassRegistry.from_json(resources.files(__package__).joinpath("data/classes.json").read_text())


def shipped_vocabulary() -> Vocabulary:
    """Vocabulary built from the bundled registry's names and descriptions."""
    return Vocabulary.from_text(resources.files(__package__).joinpath("data/vocab.txt").read_text())


def zero_shot_tokens(
    registry: ClassRegistry,
    vocab: Vocabulary,
    *,
    label_space: str = "full",
    zero_shot_text: str = "name_desc",
    use_description: bool = True,
    max_len: int = MAX_TEXT_LEN,
) -> tuple[list[int], list[TokenSequence]]:
    """Token sequences for every class in the label space, in class-id order."""
    if label_space == "full":
        entries = list(registry)
    elif label_space == "seen":
        entries = registry.seen
    else:
        raise ConfigurationError(f"unknown label space {label_space!r}")
    second = {"name_desc": "description", "name_name": "name"}.get(zero_shot_text)
    if second is None:
        raise ConfigurationError(f"unknown zero_shot_text {zero_shot_text!r}")
    seqs = [
        assemble_token(e, vocab, use_description=use_description, second=second, max_len=max_len)
        for e in entries
    ]
    return [e.class_id for e in entries], seqs

"""Class registry, tokenizer, prompt bank and prompted-sequence assembly."""

import json

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sensorlang.numerics import DimensionError
from sensorlang.synthdata import default_registry
from sensorlang.textpipe import (
    MAX_TEXT_LEN,
    PAD_ID,
    UNK_ID,
    ClassEntry,
    ClassRegistry,
    ConfigurationError,
    PromptBank,
    RegistryError,
    TokenSequence,
    Vocabulary,
    assemble_prompted,
    assemble_token,
    shipped_registry,
    shipped_vocabulary,
    tokenize,
    zero_shot_tokens,
)


@pytest.fixture(scope="module")
def registry():
    return shipped_registry()


@pytest.fixture(scope="module")
def vocab():
    return shipped_vocabulary()


class TestRegistry:
    def test_counts_and_disjointness(self, registry):
        assert len(registry.seen) == 22 and len(registry.unseen) == 5
        assert not set(registry.seen_ids) & set(registry.unseen_ids)
        assert all(e.description.strip() for e in registry)

    def test_unseen_order(self, registry):
        assert [e.name for e in registry.unseen] == [
            "left twist", "both limb extension", "right side lunge", "waving left hand", "right side throwing",
        ]

    def test_shipped_matches_generator(self, registry):
        assert registry.to_json() == default_registry().to_json()

    def test_json_round_trip(self, registry, tmp_path):
        path = tmp_path / "classes.json"
        registry.save(path)
        again = ClassRegistry.load(path)
        assert again.to_json() == registry.to_json()
        assert again.digest() == registry.digest()

    def test_rejects_extra_field(self, registry):
        doc = json.loads(registry.to_json())
        doc["classes"][0]["colour"] = "red"
        with pytest.raises(RegistryError):
            ClassRegistry.from_json(json.dumps(doc))

    def test_rejects_missing_field(self, registry):
        doc = json.loads(registry.to_json())
        del doc["classes"][3]["seen"]
        with pytest.raises(RegistryError):
            ClassRegistry.from_json(json.dumps(doc))

    def test_rejects_gaps_and_empty_description(self):
        with pytest.raises(RegistryError):
            ClassRegistry([ClassEntry(0, "a", "x", True), ClassEntry(2, "b", "y", False)])
        with pytest.raises(RegistryError):
            ClassRegistry([ClassEntry(0, "a", "  ", True)])

    def test_digest_changes_with_content(self, registry):
        entries = list(registry)
        entries[0] = ClassEntry(0, entries[0].name, entries[0].description + " slowly", True)
        assert ClassRegistry(entries).digest() != registry.digest()


class TestVocabulary:
    def test_reserved_ids(self, vocab):
        assert vocab.id("<never seen>") == UNK_ID
        assert PAD_ID == 0 and UNK_ID == 1
        assert min(vocab.id(w) for w in vocab.tokens) == 2

    def test_file_round_trip(self, vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        assert Vocabulary.load(path) == vocab
        # line number = id - 2
        lines = path.read_text().splitlines()
        assert all(vocab.id(w) == i + 2 for i, w in enumerate(lines))

    def test_first_appearance_order(self):
        v = Vocabulary.from_texts(["Left Twist", "twist right"])
        assert v.tokens == ["left", "twist", "right"]


class TestTokenize:
    def test_empty(self, vocab):
        assert tokenize("", vocab).ids == ()

    def test_case_and_order(self):
        v = Vocabulary(["left", "twist"])
        assert tokenize("Left Twist", v).ids == (2, 3)

    def test_punctuation_and_unknown(self):
        v = Vocabulary(["left", "twist"])
        assert tokenize("left, twist! spin", v).ids == (2, 3, UNK_ID)

    def test_reference_description(self, vocab):
        ids = tokenize("an activity of a person bending forward at the waist", vocab).ids
        assert len(ids) == 10 and UNK_ID not in ids

    def test_truncation(self, vocab):
        assert tokenize("left " * 50, vocab).length == MAX_TEXT_LEN

    @settings(max_examples=50, deadline=None)
    @given(st.text(max_size=80))
    def test_stable_under_vocab_round_trip(self, text):
        v = shipped_vocabulary()
        assert tokenize(text, v) == tokenize(text, Vocabulary.from_text(v.to_text()))


class TestAssembleToken:
    def test_name_then_description(self, registry, vocab):
        bow = registry.by_name("bowing")
        assert bow.description == "an activity of a person bending forward at the waist"
        seq = assemble_token(bow, vocab)
        assert seq.ids == tokenize("bowing", vocab).ids + tokenize(bow.description, vocab).ids

    def test_description_ablation(self, vocab):
        entry = ClassEntry(0, "left twist", "ignored words", True)
        assert assemble_token(entry, vocab, use_description=False).ids == tokenize("left twist", vocab).ids

    def test_length_rule(self, registry, vocab):
        for e in registry:
            n = len(tokenize(e.name, vocab).ids) + len(tokenize(e.description, vocab).ids)
            assert assemble_token(e, vocab).length == min(n, MAX_TEXT_LEN)

    def test_empty_is_configuration_error(self):
        with pytest.raises(ConfigurationError):
            assemble_token(ClassEntry(0, "!!", "??", True), Vocabulary([]), use_description=True)

    def test_name_name_reading(self, registry, vocab):
        e = registry.by_name("left twist")
        name = tokenize(e.name, vocab).ids
        assert assemble_token(e, vocab, second="name").ids == name + name


class TestAssemblePrompted:
    def _setup(self, n, width=8, vocab_size=20):
        torch.manual_seed(0)
        return PromptBank(n, width), torch.nn.Embedding(vocab_size, width)

    def test_extent_and_order(self):
        bank, embed = self._setup(16)
        seq = TokenSequence(tuple(range(2, 10)))
        out = assemble_prompted(seq, bank, embed)
        assert out.rows.shape == (40, 8)
        assert torch.equal(out.rows[:16], bank.vectors[:16])
        assert torch.equal(out.rows[16:24], embed(torch.arange(2, 10)))
        assert torch.equal(out.rows[24:], bank.vectors[16:])
        assert bool(out.mask.all())

    def test_no_prompts_is_embedding(self):
        bank, embed = self._setup(0)
        seq = TokenSequence((3, 4, 5))
        out = assemble_prompted(seq, bank, embed)
        assert torch.equal(out.rows, embed(torch.tensor([3, 4, 5])))

    def test_shared_prompts_identical_across_classes(self):
        bank, embed = self._setup(4)
        out = assemble_prompted([TokenSequence((2, 3)), TokenSequence((5, 6, 7, 8))], bank, embed)
        assert torch.equal(out.rows[0, :4], out.rows[1, :4])
        # tail prompts follow each row's own tokens
        assert torch.equal(out.rows[0, 6:10], out.rows[1, 8:12])
        assert out.mask.sum(1).tolist() == [10, 12]
        assert torch.all(out.rows[0, 10:] == 0)

    def test_width_mismatch(self):
        bank = PromptBank(2, 8)
        with pytest.raises(DimensionError):
            assemble_prompted(TokenSequence((2,)), bank, torch.nn.Embedding(5, 6))

    def test_gradient_reaches_bank(self):
        bank, embed = self._setup(3)
        out = assemble_prompted([TokenSequence((2, 3)), TokenSequence((4,))], bank, embed)
        (out.rows * torch.randn_like(out.rows)).sum().backward()
        assert bank.vectors.grad is not None and bool((bank.vectors.grad != 0).all())

    def test_init_scale(self):
        bank = PromptBank(16, 64, torch.Generator().manual_seed(0))
        assert bank.vectors.shape == (32, 64)
        assert 0.015 < float(bank.vectors.detach().std()) < 0.025

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 6), st.lists(st.integers(1, 12), min_size=1, max_size=5))
    def test_extent_property(self, n, lengths):
        bank, embed = self._setup(n)
        seqs = [TokenSequence(tuple([2] * L)) for L in lengths]
        out = assemble_prompted(seqs, bank, embed)
        assert out.mask.sum(1).tolist() == [2 * n + L for L in lengths]
        assert out.rows.shape[1] == 2 * n + max(lengths)


class TestZeroShotTokens:
    def test_label_spaces(self, registry, vocab):
        ids, seqs = zero_shot_tokens(registry, vocab)
        assert ids == list(range(27)) and len(seqs) == 27
        ids, seqs = zero_shot_tokens(registry, vocab, label_space="seen")
        assert ids == registry.seen_ids and len(seqs) == 22

    def test_shared_motion_token(self, registry, vocab):
        twist = vocab.id("twist")
        _, seqs = zero_shot_tokens(registry, vocab)
        assert twist in seqs[registry.by_name("left twist").class_id].ids
        assert twist in seqs[registry.by_name("right twist").class_id].ids

    def test_same_rule_as_training(self, registry, vocab):
        _, seqs = zero_shot_tokens(registry, vocab)
        assert seqs == [assemble_token(e, vocab) for e in registry]

    def test_unknown_options(self, registry, vocab):
        with pytest.raises(ConfigurationError):
            zero_shot_tokens(registry, vocab, label_space="unseen")
        with pytest.raises(ConfigurationError):
            zero_shot_tokens(registry, vocab, zero_shot_text="desc_desc")

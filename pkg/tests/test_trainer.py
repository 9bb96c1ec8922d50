"""Optimizer step, learning-rate schedule, bundles and epochs."""

import pytest
import torch

from sensorlang.alignment import LossConfig
from sensorlang.encoders import ModelConfig
from sensorlang.synthdata import build_splits
from sensorlang.textpipe import ConfigurationError, Vocabulary
from sensorlang.trainer import (
    NumericError,
    PackedSplit,
    TrainConfig,
    batches,
    build_bundle,
    lr_schedule,
    sgdm_step,
    train,
    train_epoch,
)

TINY = dict(width=16, heads=2, video_blocks=1, point_blocks=1, temporal_blocks=1, text_blocks=1, point_budget=12)


def tiny_bundle(ds, **train_kw):
    cfg = TrainConfig(**{"epochs": 2, **train_kw})
    return build_bundle(ds.registry, Vocabulary.from_registry(ds.registry), cfg, LossConfig(), ModelConfig(**TINY))


@pytest.fixture(scope="module")
def train_split(small_dataset):
    train_idx, _ = build_splits(small_dataset, "random")
    return PackedSplit.from_dataset(small_dataset, train_idx[::3], budget=TINY["point_budget"])


class TestSgdm:
    def _param(self, value=1.0):
        return torch.nn.Parameter(torch.tensor([value]))

    def test_plain_descent(self):
        p = self._param()
        p.grad = torch.tensor([2.0])
        sgdm_step([("p", p)], {}, lr=0.1, momentum=0.0, weight_decay=0.0)
        assert torch.allclose(p.detach(), torch.tensor([0.8]))

    def test_two_momentum_steps(self):
        p, bufs, g = self._param(0.0), {}, torch.tensor([1.0])
        for _ in range(2):
            p.grad = g.clone()
            sgdm_step([("p", p)], bufs, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert abs(float(p.detach()) + 0.29) < 1e-7

    def test_weight_decay_enters_buffer(self):
        p, bufs = self._param(2.0), {}
        p.grad = torch.tensor([0.0])
        sgdm_step([("p", p)], bufs, lr=1.0, momentum=0.0, weight_decay=0.5)
        assert float(bufs["p"]) == 1.0 and float(p.detach()) == 1.0

    def test_frozen_untouched(self):
        frozen = torch.ones(3)
        frozen.grad = torch.ones(3)
        sgdm_step([("f", frozen)], {}, lr=1.0, momentum=0.9, weight_decay=0.0)
        assert torch.equal(frozen, torch.ones(3))

    def test_non_finite_gradient_named(self):
        a, b = self._param(), self._param()
        a.grad, b.grad = torch.tensor([1.0]), torch.tensor([float("nan")])
        with pytest.raises(NumericError, match="'second'"):
            sgdm_step([("first", a), ("second", b)], {}, 0.1, 0.9, 0.0)


class TestSchedule:
    @pytest.mark.parametrize("epoch,lr", [(0, 1e-3), (19, 1e-3), (20, 1e-4), (30, 1e-5), (45, 1e-6)])
    def test_steps(self, epoch, lr):
        assert lr_schedule(epoch, TrainConfig()) == pytest.approx(lr, rel=1e-12)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.epochs, cfg.lr_steps) == (
            10, 0.001, 0.9, 0.0005, 50, (20, 30, 40))

    @pytest.mark.parametrize("kwargs", [{"mode": "hybrid"}, {"modalities": ("sonar",)}, {"batch_size": 0},
                                        {"zero_shot_text": "desc"}])
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kwargs)


class TestBatches:
    def test_cover_once_and_keep_short_batch(self):
        got = list(batches(23, 10, seed=0, epoch=0))
        assert [len(b) for b in got] == [10, 10, 3]
        assert sorted(torch.cat(got).tolist()) == list(range(23))

    def test_seeded_per_epoch(self):
        a = torch.cat(list(batches(30, 10, 1, 0)))
        assert torch.equal(a, torch.cat(list(batches(30, 10, 1, 0))))
        assert not torch.equal(a, torch.cat(list(batches(30, 10, 1, 1))))


class TestBundles:
    def test_joint_is_one_member(self, small_dataset):
        b = tiny_bundle(small_dataset)
        assert list(b.members) == ["joint"] and b.modalities == ("video", "lidar", "radar")

    def test_separate_members(self, small_dataset):
        b = tiny_bundle(small_dataset, joint=False)
        assert list(b.members) == ["video", "lidar", "radar"]
        assert all(m.text is not None for m in b.members.values())
        assert b.member_for("radar") is b.members["radar"]

    def test_vanilla_heads(self, small_dataset):
        b = tiny_bundle(small_dataset, mode="vanilla")
        for key, m in b.members.items():
            assert m.text is None and m.heads[key].out_features == 22

    def test_prompt_flag(self, small_dataset):
        assert tiny_bundle(small_dataset).members["joint"].text.prompts.n == 16
        assert tiny_bundle(small_dataset, soft_prompt=False).members["joint"].text.prompts.n == 0

    @pytest.mark.parametrize("flags", [
        dict(joint=False, description=False, soft_prompt=False),
        dict(joint=False, description=True, soft_prompt=False),
        dict(joint=False, description=False, soft_prompt=True),
        dict(joint=False, description=True, soft_prompt=True),
        dict(joint=True, description=False, soft_prompt=False),
        dict(joint=True, description=True, soft_prompt=False),
        dict(joint=True, description=True, soft_prompt=True),
    ])
    def test_ablation_grid_reachable(self, small_dataset, flags):
        b = tiny_bundle(small_dataset, **flags)
        m = next(iter(b.members.values()))
        assert m.description == flags["description"]
        assert (m.text.prompts.n > 0) == flags["soft_prompt"]


class TestEpochs:
    def test_deterministic(self, small_dataset, train_split):
        a, b = tiny_bundle(small_dataset), tiny_bundle(small_dataset)
        ha, hb = train(a, train_split), train(b, train_split)
        assert [(s.joint, s.per_modality) for s in ha] == [(s.joint, s.per_modality) for s in hb]
        for (na, pa), (nb, pb) in zip(a.named_tensors(), b.named_tensors()):
            assert na == nb and torch.equal(pa, pb)

    def test_only_trainable_tensors_change(self, small_dataset, train_split):
        b = tiny_bundle(small_dataset)
        before = {n: p.detach().clone() for n, p in b.named_tensors()}
        train_epoch(b, train_split)
        trainable = {f"joint/{n}" for n, _ in b.members["joint"].trainable()}
        changed = {n for n, p in b.named_tensors() if not torch.equal(before[n], p)}
        assert changed == trainable

    def test_separate_runs_isolated(self, small_dataset, train_split):
        """Each separate member only sees its own loss; other members' weights stay put."""
        b = tiny_bundle(small_dataset, joint=False, modalities=("video", "radar"))
        stats = train_epoch(b, train_split)
        assert set(stats.per_modality) == {"video", "radar"}
        assert set(b.buffers) == {"video", "radar"}

    def test_stats_and_epoch_counter(self, small_dataset, train_split):
        b = tiny_bundle(small_dataset)
        s0 = train_epoch(b, train_split)
        s1 = train_epoch(b, train_split)
        assert (s0.epoch, s1.epoch, b.epoch) == (0, 1, 2)
        expected = sum(LossConfig().weight(m) * v for m, v in s0.per_modality.items())
        assert s0.joint == pytest.approx(expected, rel=1e-6)

    def test_rejects_unseen_and_empty(self, small_dataset):
        b = tiny_bundle(small_dataset)
        unseen = [i for i, s in enumerate(small_dataset.samples) if s.class_id == small_dataset.registry.unseen_ids[0]]
        with pytest.raises(ConfigurationError):
            train_epoch(b, PackedSplit.from_dataset(small_dataset, unseen[:2], budget=12))
        with pytest.raises(ConfigurationError):
            train_epoch(b, PackedSplit.from_dataset(small_dataset, [], budget=12))

    def test_vanilla_trains(self, small_dataset, train_split):
        b = tiny_bundle(small_dataset, mode="vanilla", modalities=("lidar",))
        stats = train(b, train_split, epochs=2)
        assert all(s.joint > 0 for s in stats)

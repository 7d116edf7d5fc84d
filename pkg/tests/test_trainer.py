import json
import math

import numpy as np
import pytest
import torch

from dualvvs.losses import combined_loss
from dualvvs.model import BackboneConfig, HeadConfig
from dualvvs.trainer import TrainConfig, Trainer, TrainingError, epoch_order, train

TIMING_FIELDS = ("time", "seconds")


def small_config(**overrides):
    base = dict(batch_size=8, epochs=2, learning_rate=0.1, alpha=0.5,
                backbone=BackboneConfig("tiny_conv", 16, 32), heads=HeadConfig(8, 16))
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def batch(small_images):
    return torch.from_numpy(small_images.get(slice(0, 8)))


def metrics(path):
    """Logged records without wall-clock fields."""
    out = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        out.append({k: v for k, v in rec.items() if k not in TIMING_FIELDS})
    return out


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(alpha=-0.01), dict(batch_size=1), dict(temperature=0.0),
        dict(lr_schedule="step"), dict(dtype="float16"), dict(epochs=0),
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            small_config(**kwargs)

    def test_size_mismatch(self):
        from dualvvs.augment import AugmentPolicy

        with pytest.raises(ValueError, match="output_size"):
            small_config(augment=AugmentPolicy(output_size=64))

    def test_dict_roundtrip(self):
        cfg = small_config(seed=4, lr_schedule="cosine")
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_presets(self):
        full = TrainConfig.paper()
        assert (full.batch_size, full.epochs, full.learning_rate) == (512, 500, 1.5)
        assert full.backbone.architecture == "resnet18" and full.augment.output_size == 96
        assert TrainConfig.desk(alpha=0.0).alpha == 0.0


class TestStep:
    def test_updates_parameters(self, batch):
        tr = Trainer(small_config())
        before = tr.model.weights_digest()
        out = tr.step(batch)
        assert tr.version == 1
        assert tr.model.weights_digest() != before
        assert out.total == pytest.approx(combined_loss(out.cl_loss, out.rpl_loss, 0.5).total, abs=1e-6)

    def test_alpha_zero_leaves_rp_head_without_gradient(self, batch):
        tr = Trainer(small_config(alpha=0.0))
        out = tr.step(batch)
        assert all(torch.count_nonzero(p.grad) == 0 for p in tr.model.h.parameters())
        assert any(torch.count_nonzero(p.grad) > 0 for p in tr.model.f.parameters())
        assert math.isfinite(out.rpl_loss) and out.total == out.cl_loss

    def test_alpha_zero_matches_rp_disabled(self, batch):
        a = Trainer(small_config(alpha=0.0))
        b = Trainer(small_config(alpha=0.0, rp_enabled=False))
        for i in range(3):
            oa, ob = a.step(batch, batch_index=i), b.step(batch, batch_index=i)
            assert oa.cl_loss == ob.cl_loss
        fa = dict(a.model.f.named_parameters())
        for name, p in b.model.f.named_parameters():
            assert torch.equal(p, fa[name])

    def test_frozen_model(self, batch):
        tr = Trainer(small_config())
        tr.model.freeze()
        with pytest.raises(RuntimeError, match="frozen"):
            tr.step(batch)

    def test_eval_mode(self, batch):
        tr = Trainer(small_config())
        tr.model.eval()
        with pytest.raises(RuntimeError, match="training mode"):
            tr.step(batch)

    def test_empty_batch(self):
        tr = Trainer(small_config())
        with pytest.raises(ValueError):
            tr.step(torch.zeros(0, 3, 32, 32))
        assert tr.version == 0

    def test_seeded_steps_repeat(self, batch):
        outs = [Trainer(small_config(seed=2)).step(batch) for _ in range(2)]
        assert outs[0] == outs[1]

    def test_loss_decreases_on_fixed_batch(self, batch):
        tr = Trainer(small_config(learning_rate=0.05, alpha=1.0))
        first = tr.step(batch, batch_index=0).total
        for _ in range(40):
            last = tr.step(batch, batch_index=0).total
        assert last < first


class TestNonFinite:
    def _poison(self, tr):
        def bad(batch, rng_views, rng_rp):
            t = torch.tensor(float("nan"), requires_grad=True)
            return t, t
        tr.compute_losses = bad

    def test_failsafe_skips_then_clips_then_aborts(self, batch):
        tr = Trainer(small_config())
        self._poison(tr)
        before = tr.model.weights_digest()
        assert tr.step(batch) is None
        assert tr.step(batch) is None
        assert tr.clip and tr.nonfinite_events == 2
        assert tr.model.weights_digest() == before and tr.version == 0
        with pytest.raises(TrainingError, match="non-finite"):
            tr.step(batch)

    def test_abort_without_failsafe(self, batch):
        tr = Trainer(small_config(nonfinite_failsafe=False))
        self._poison(tr)
        with pytest.raises(TrainingError, match="batch_mean"):
            tr.step(batch)


class TestTrainLoop:
    def test_logs_and_checkpoints(self, small_images, tmp_path):
        series = train(small_config(epochs=3, checkpoint_every=2), small_images, run_dir=tmp_path)
        assert [e for e, _ in series.checkpoints] == [2, 3]
        assert all(p.exists() for _, p in series.checkpoints)
        recs = metrics(tmp_path / "train_log.jsonl")
        steps = [r for r in recs if r["event"] == "step"]
        assert len(steps) == 3 * (len(small_images) // 8)
        assert all(math.isfinite(r["total"]) for r in recs)
        assert not series.model.training

    def test_bit_identical_reruns(self, small_images, tmp_path):
        for name in ("a", "b"):
            train(small_config(seed=11), small_images, run_dir=tmp_path / name)
        assert metrics(tmp_path / "a" / "train_log.jsonl") == metrics(tmp_path / "b" / "train_log.jsonl")
        a = (tmp_path / "a" / "checkpoints" / "epoch_0002.pt")
        b = (tmp_path / "b" / "checkpoints" / "epoch_0002.pt")
        from dualvvs.model import load_checkpoint

        assert load_checkpoint(a)[0].weights_digest() == load_checkpoint(b)[0].weights_digest()

    def test_alpha_zero_rp_loss_stays_at_chance(self, small_images):
        series = train(small_config(alpha=0.0, epochs=3), small_images)
        for rec in series.epoch_logs:
            assert abs(rec["rpl_loss"] - math.log(8)) < 0.15

    def test_size_mismatch(self, small_images):
        from dualvvs.augment import AugmentPolicy

        cfg = small_config(backbone=BackboneConfig("tiny_conv", 16, 64), augment=AugmentPolicy(output_size=64))
        with pytest.raises(ValueError, match="64"):
            train(cfg, small_images)


def test_epoch_order_is_permutation():
    order = epoch_order(3, 1, 50)
    assert sorted(order.tolist()) == list(range(50))
    assert np.array_equal(order, epoch_order(3, 1, 50))
    assert not np.array_equal(order, epoch_order(3, 2, 50))

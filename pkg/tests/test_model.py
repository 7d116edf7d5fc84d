import numpy as np
import pytest
import torch

from dualvvs.data import synth_image_set
from dualvvs.model import (
    LAYER_REGISTRY,
    BackboneConfig,
    DualTaskModel,
    HeadConfig,
    expected_parameter_counts,
    load_checkpoint,
    save_checkpoint,
)
from gradcheck import combined_loss_gradients, relative_error


@pytest.fixture
def batch(small_images):
    return torch.as_tensor(small_images.get(slice(0, 6)))


class TestShapes:
    def test_encode_project_rp(self, tiny_model, batch):
        feats = tiny_model.encode(batch)
        assert feats.shape == (6, 16)
        assert tiny_model.project(feats).shape == (6, 8)
        assert tiny_model.rp_logits(feats, feats).shape == (6, 8)

    def test_quadrant_sized_input(self, tiny_model, batch):
        assert tiny_model.encode(batch[:, :, :16, :16]).shape == (6, 16)

    @pytest.mark.parametrize("size", [8, 24, 31])
    def test_wrong_size(self, tiny_model, size):
        with pytest.raises(ValueError):
            tiny_model.encode(torch.zeros(2, 3, size, size))

    def test_classify_rp_is_ordered_distribution(self, tiny_model, batch):
        tiny_model.eval()
        fa, fb = tiny_model.encode(batch[:3]), tiny_model.encode(batch[3:])
        p = tiny_model.classify_rp(fa, fb)
        torch.testing.assert_close(p.sum(1), torch.ones(3))
        assert not torch.allclose(p, tiny_model.classify_rp(fb, fa))

    def test_mismatched_rp_inputs(self, tiny_model):
        with pytest.raises(ValueError):
            tiny_model.rp_logits(torch.zeros(2, 16), torch.zeros(3, 16))


class TestConstruction:
    def test_seed_determinism(self):
        cfg = (BackboneConfig("tiny_conv", 16, 32), HeadConfig(8, 16))
        a, b = DualTaskModel(*cfg, seed=5), DualTaskModel(*cfg, seed=5)
        assert a.weights_digest() == b.weights_digest()
        assert a.weights_digest() != DualTaskModel(*cfg, seed=6).weights_digest()

    def test_global_rng_untouched(self):
        torch.manual_seed(0)
        expected = torch.rand(1)
        torch.manual_seed(0)
        DualTaskModel(BackboneConfig("tiny_conv", 16, 32), HeadConfig(8, 16), seed=9)
        assert torch.equal(torch.rand(1), expected)

    @pytest.mark.parametrize("backbone,heads", [
        (BackboneConfig("tiny_conv", 16, 32), HeadConfig(8, 16)),
        (BackboneConfig("tiny_conv", 64, 32), HeadConfig()),
        (BackboneConfig("tiny_conv", 32, 64, widths=[3, 5, 7, 32]), HeadConfig(16, 40)),
        (BackboneConfig("resnet18", 512, 96), HeadConfig()),
    ])
    def test_parameter_count_audit(self, backbone, heads):
        model = DualTaskModel(backbone, heads)
        assert model.part_parameter_counts() == expected_parameter_counts(backbone, heads)

    @pytest.mark.parametrize("kwargs", [
        dict(architecture="vgg"),
        dict(architecture="resnet18", feature_dim=64),
        dict(feature_dim=0),
        dict(widths=[4, 8, 16, 32]),
    ])
    def test_bad_backbone(self, kwargs):
        with pytest.raises(ValueError):
            BackboneConfig(**kwargs)

    def test_bad_heads(self):
        with pytest.raises(ValueError):
            HeadConfig(rp_classes=4)


class TestActivations:
    def test_registry(self, tiny_model):
        assert tiny_model.layer_names == LAYER_REGISTRY
        assert len(LAYER_REGISTRY) == 9
        assert LAYER_REGISTRY[0] == "stem" and LAYER_REGISTRY[-1] == "layer4.1"
        assert set(tiny_model.layer_modules()) == set(LAYER_REGISTRY)

    def test_unknown_layer(self, tiny_model, small_images):
        with pytest.raises(KeyError, match="layer4.1"):
            tiny_model.record_activations(small_images, ["layer5.0"])

    def test_chunking_invariance(self, tiny_model, small_images):
        a = tiny_model.record_activations(small_images, LAYER_REGISTRY, batch_size=64)
        b = tiny_model.record_activations(small_images, LAYER_REGISTRY, batch_size=7)
        for name in LAYER_REGISTRY:
            assert a[name].values.shape[0] == len(small_images)
            np.testing.assert_allclose(a[name].values, b[name].values, atol=1e-5)

    def test_last_layer_is_pooled_input(self, tiny_model, small_images):
        acts = tiny_model.record_activations(small_images, ["layer4.1"])["layer4.1"].values
        tiny_model.eval()
        with torch.no_grad():
            feats = tiny_model.encode(torch.as_tensor(small_images.get(slice(None)))).numpy()
        c = tiny_model.backbone_config.feature_dim
        pooled = acts.reshape(len(small_images), c, -1).mean(2)
        np.testing.assert_allclose(pooled, feats, atol=1e-5)

    def test_mode_restored(self, tiny_model, small_images):
        tiny_model.train()
        tiny_model.record_activations(small_images, ["stem"])
        assert tiny_model.training


class TestFreeze:
    def test_freeze_disables_grad(self, tiny_model):
        tiny_model.freeze()
        assert tiny_model.frozen and not tiny_model.training
        assert not any(p.requires_grad for p in tiny_model.parameters())
        tiny_model.unfreeze()
        assert all(p.requires_grad for p in tiny_model.parameters())


class TestGradient:
    def test_combined_loss_finite_differences(self):
        images = synth_image_set(3, 4, 2, 16).images
        analytic, numeric, n_params = combined_loss_gradients(images)
        assert n_params <= 10_000
        assert relative_error(analytic, numeric) < 1e-3


class TestCheckpoint:
    def test_roundtrip(self, tiny_model, tmp_path, batch):
        path = save_checkpoint(tiny_model, tmp_path / "c.pt", epoch=3, extra={"alpha": 0.01})
        back, meta = load_checkpoint(path, tiny_model.backbone_config, tiny_model.head_config)
        assert meta == {"epoch": 3, "extra": {"alpha": 0.01}}
        assert back.weights_digest() == tiny_model.weights_digest()
        tiny_model.eval(), back.eval()
        assert torch.equal(tiny_model.encode(batch), back.encode(batch))

    def test_config_mismatch(self, tiny_model, tmp_path):
        path = save_checkpoint(tiny_model, tmp_path / "c.pt", epoch=0)
        with pytest.raises(ValueError, match="backbone"):
            load_checkpoint(path, BackboneConfig("tiny_conv", 32, 32))
        with pytest.raises(ValueError, match="heads"):
            load_checkpoint(path, heads=HeadConfig(8, 32))


def test_resnet18_smoke():
    model = DualTaskModel(BackboneConfig("resnet18", 512, 96), HeadConfig()).eval()
    with torch.no_grad():
        feats = model.encode(torch.rand(2, 3, 96, 96))
        assert feats.shape == (2, 512)
        assert model.encode(torch.rand(2, 3, 48, 48)).shape == (2, 512)
    acts = model.record_activations(np.random.default_rng(0).random((2, 3, 96, 96), dtype=np.float32),
                                    ["stem", "layer4.1"])
    assert acts["stem"].values.shape == (2, 64 * 96 * 96)
    assert acts["layer4.1"].values.shape == (2, 512 * 12 * 12)

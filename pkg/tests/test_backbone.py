import numpy as np
import pytest
import torch
import torchvision

from lungsound.backbone import (
    BackboneSpec,
    ResNet,
    attach_heads,
    build,
    import_weights,
    key_table,
    load_archive,
    n_source_classes,
    pooled_embedding,
    save_archive,
    swap_norm,
)
from lungsound.errors import ConfigError, HeadDimMismatch, MissingWeights, WeightShapeMismatch
from lungsound.stochnorm import StochNorm2d


def _reference(depth):
    torch.manual_seed(depth)
    net = getattr(torchvision.models, f"resnet{depth}")(weights=None)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.normal_(0, 0.1)
                m.running_var.uniform_(0.5, 1.5)
                m.weight.uniform_(0.5, 1.5)
                m.bias.normal_(0, 0.1)
    net.eval()
    return net, {k: v.numpy() for k, v in net.state_dict().items()}


class TestImport:
    @pytest.mark.parametrize("depth,dim", [(18, 512), (50, 2048)])
    def test_matches_reference_resnet(self, depth, dim):
        ref, archive = _reference(depth)
        model = build(BackboneSpec(depth=depth, pretrained="random"), archive)
        x = torch.randn(2, 3, 64, 64)
        z = pooled_embedding(model, x.numpy())
        assert z.shape == (2, dim)
        ref.fc = torch.nn.Identity()
        with torch.no_grad():
            np.testing.assert_allclose(z, ref(x).numpy(), atol=1e-4)

    def test_import_is_bit_exact(self):
        _, archive = _reference(18)
        model = ResNet(18)
        import_weights(model, archive)
        for k, v in model.state_dict().items():
            if not k.endswith("num_batches_tracked"):
                assert v.numpy().tobytes() == archive[k].astype(v.numpy().dtype).tobytes(), k

    def test_key_table_covers_reference(self):
        _, archive = _reference(18)
        table = key_table(18)
        want = {k: v.shape for k, v in archive.items() if not k.endswith("num_batches_tracked")}
        assert {k: tuple(s) for k, s in want.items()} == dict(table)

    def test_missing_key(self):
        _, archive = _reference(18)
        del archive["layer2.0.conv1.weight"]
        with pytest.raises(MissingWeights):
            import_weights(ResNet(18), archive)

    def test_wrong_shape(self):
        _, archive = _reference(18)
        archive["conv1.weight"] = archive["conv1.weight"][:, :1]
        with pytest.raises(WeightShapeMismatch):
            import_weights(ResNet(18), archive)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingWeights):
            load_archive(tmp_path / "absent.npz")

    def test_archive_round_trip(self, tmp_path):
        model = ResNet(18, base_width=4)
        save_archive(tmp_path / "w.npz", model.state_dict())
        back = ResNet(18, base_width=4)
        import_weights(back, load_archive(tmp_path / "w.npz"), base_width=4)
        for (k, a), b in zip(model.state_dict().items(), back.state_dict().values()):
            assert torch.equal(a, b), k

    def test_unsupported_depth(self):
        with pytest.raises(ConfigError):
            BackboneSpec(depth=42)


class TestStochasticSwap:
    def test_every_bn_replaced_and_params_kept(self):
        model = ResNet(18, base_width=8)
        n_params = sum(p.numel() for p in model.parameters())
        n_bn = sum(isinstance(m, torch.nn.BatchNorm2d) for m in model.modules())
        assert swap_norm(model) == n_bn
        assert not any(isinstance(m, torch.nn.BatchNorm2d) for m in model.modules())
        assert sum(isinstance(m, StochNorm2d) for m in model.modules()) == n_bn
        assert sum(p.numel() for p in model.parameters()) == n_params

    def test_p1_matches_batch_norm_training(self):
        _, archive = _reference(18)
        plain = build(BackboneSpec(depth=18, pretrained="random"), archive).train()
        stoch = build(BackboneSpec(depth=18, pretrained="random", norm_kind="stochastic", p=1.0), archive).train()
        x = torch.randn(4, 3, 64, 64)
        with torch.no_grad():
            np.testing.assert_allclose(stoch(x).numpy(), plain(x).numpy(), atol=1e-4)

    def test_eval_matches_batch_norm_eval(self):
        _, archive = _reference(18)
        plain = build(BackboneSpec(depth=18, pretrained="random"), archive)
        stoch = build(BackboneSpec(depth=18, pretrained="random", norm_kind="stochastic"), archive)
        x = np.random.default_rng(0).standard_normal((2, 3, 48, 48)).astype(np.float32)
        np.testing.assert_allclose(pooled_embedding(stoch, x), pooled_embedding(plain, x), atol=1e-5)


class TestHeads:
    def test_vanilla_has_no_source_head(self):
        m = attach_heads(ResNet(18, base_width=8), None, 4, "vanilla")
        assert m.source_head is None
        assert m.target_head.weight.shape == (4, 64)
        t, s = m.forward_both(torch.randn(2, 3, 32, 32))
        assert t.shape == (2, 4) and s is None

    def test_source_head_from_archive(self):
        rng = np.random.default_rng(1)
        archive = {"fc.weight": rng.standard_normal((10, 64)).astype(np.float32),
                   "fc.bias": rng.standard_normal(10).astype(np.float32)}
        assert n_source_classes(archive) == 10
        m = attach_heads(ResNet(18, base_width=8), 10, 2, "cotuning", archive)
        np.testing.assert_array_equal(m.source_head.weight.detach().numpy(), archive["fc.weight"])

    def test_source_head_dim_mismatch(self):
        archive = {"fc.weight": np.zeros((10, 32), np.float32), "fc.bias": np.zeros(10, np.float32)}
        with pytest.raises(HeadDimMismatch):
            attach_heads(ResNet(18, base_width=8), 10, 2, "cotuning", archive)

    def test_single_class_target(self):
        with pytest.raises(HeadDimMismatch):
            attach_heads(ResNet(18, base_width=8), None, 1, "vanilla")

    def test_target_head_seeded(self):
        a = attach_heads(ResNet(18, base_width=8), None, 3, "vanilla", seed=5)
        b = attach_heads(ResNet(18, base_width=8), None, 3, "vanilla", seed=5)
        assert torch.equal(a.target_head.weight, b.target_head.weight)

    def test_source_head_not_on_inference_path(self):
        archive = {"fc.weight": np.zeros((10, 64), np.float32), "fc.bias": np.zeros(10, np.float32)}
        m = attach_heads(ResNet(18, base_width=8), 10, 2, "cotuning", archive).eval()
        x = torch.randn(2, 3, 32, 32)
        before = m(x)
        with torch.no_grad():
            m.source_head.weight.fill_(7.0)
        assert torch.equal(before, m(x))


class TestEmbedding:
    def test_deterministic_and_finite(self):
        model = build(BackboneSpec(depth=18, pretrained="random", base_width=8))
        x = np.full((3, 40, 40), 0.25, dtype=np.float32)
        a, b = pooled_embedding(model, x), pooled_embedding(model, x)
        assert a.shape == (64,)
        assert np.all(np.isfinite(a))
        assert a.tobytes() == b.tobytes()

    def test_restores_training_flag(self):
        model = ResNet(18, base_width=8).train()
        pooled_embedding(model, np.zeros((1, 3, 32, 32), np.float32))
        assert model.training

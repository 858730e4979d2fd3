import numpy as np
import pytest
import torch
from torch import nn

from soundloc.data import Heatmap, read_heatmap
from soundloc.encoders import (
    AttentionStack,
    CaptureSession,
    EncoderConfig,
    SpatialFeatureMap,
    ToyModel,
)
from soundloc.errors import ConfigError, ContractError
from soundloc.localizers import (
    LocalizerKind,
    attention_with_grads,
    cosine_map,
    gradcam_capture,
    gradcam_raw,
    localize_cossim,
    localize_gradcam,
    localize_transformer_mm,
    relevancy,
    run_localizer,
    upsample_bilinear,
)
from soundloc.metrics import EvalConfig, evaluate
from tests import oracles


def _check_heatmap(h: Heatmap, w: int, h_: int):
    assert h.normalized and (h.width, h.height) == (w, h_)
    v = h.values
    assert v.min() >= 0 and v.max() <= 1
    assert (v.min() == 0 and v.max() == 1) or not v.any()


class TestUpsample:
    @pytest.mark.parametrize("shape,out", [((14, 14), (224, 224)), ((3, 5), (7, 11)), ((4, 4), (4, 4))])
    def test_matches_oracle(self, shape, out):
        grid = np.random.default_rng(0).random(shape)
        expected = np.array(oracles.bilinear(grid.tolist(), *out))
        assert np.allclose(upsample_bilinear(grid, *out), expected, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_argmax_within_one_cell(self, seed):
        rng = np.random.default_rng(seed)
        grid = rng.random((14, 14))
        r, c = rng.integers(0, 14, 2)
        grid[r, c] = 1.1  # a clear, unique maximum
        up = upsample_bilinear(grid, 224, 224)
        ur, uc = np.unravel_index(up.argmax(), up.shape)
        scale = 223 / 13
        assert abs(ur / scale - r) <= 1 and abs(uc / scale - c) <= 1


class TestCossim:
    def test_single_matching_patch(self):
        d = 16
        a = np.zeros(d)
        a[0] = 1.0
        feats = np.zeros((d, 14, 14))
        feats[1] = 1.0
        feats[:, 5, 9] = a
        heat = localize_cossim(SpatialFeatureMap(feats), a, 222, 222)
        _check_heatmap(heat, 222, 222)
        # 221 / 13 = 17 output pixels per source cell, so the patch center is sampled exactly
        assert heat.values[5 * 17, 9 * 17] == 1.0
        assert np.unravel_index(heat.values.argmax(), heat.values.shape) == (85, 153)

    def test_identical_patches(self):
        feats = np.tile(np.random.default_rng(0).standard_normal((8, 1, 1)), (1, 14, 14))
        heat = localize_cossim(SpatialFeatureMap(feats), np.ones(8), 224, 224)
        assert not heat.values.any()

    def test_brute_force_cosine(self):
        rng = np.random.default_rng(2)
        feats, a = rng.standard_normal((64, 14, 14)), rng.standard_normal(64)
        raw = cosine_map(SpatialFeatureMap(feats), a)
        for r in range(14):
            for c in range(14):
                f = feats[:, r, c]
                assert abs(raw[r, c] - float(f @ a) / (np.linalg.norm(f) * np.linalg.norm(a))) < 1e-6

    def test_dim_mismatch(self):
        with pytest.raises(ContractError):
            localize_cossim(SpatialFeatureMap(np.ones((8, 14, 14))), np.ones(7), 224, 224)

    @pytest.mark.parametrize("scale", [0.01, 3.7, 1000.0])
    def test_scale_invariance(self, scale):
        rng = np.random.default_rng(5)
        feats, a = SpatialFeatureMap(rng.standard_normal((32, 14, 14))), rng.standard_normal(32)
        base = localize_cossim(feats, a, 224, 224).values
        assert np.abs(localize_cossim(feats, scale * a, 224, 224).values - base).max() <= 1e-6


class _LinearEncoder(nn.Module):
    """Single-channel 1x1 conv, mean pool, fixed projection; no normalization."""

    def __init__(self, w, v):
        super().__init__()
        self.feat = nn.Conv2d(3, 1, 1, bias=False)
        with torch.no_grad():
            self.feat.weight.copy_(torch.as_tensor(w, dtype=torch.float64).reshape(1, 3, 1, 1))
        self.register_buffer("v", torch.as_tensor(v, dtype=torch.float64))
        self.double()

    def forward(self, x):
        return self.feat(x).mean(dim=(2, 3)) * self.v


class TestGradcam:
    def _model(self, seed=0):
        return ToyModel(EncoderConfig(seed=seed)).image.double()

    def test_zero_audio(self):
        heat = localize_gradcam(self._model(), torch.randn(1, 3, 224, 224), np.zeros(64), 224, 224)
        assert not heat.values.any()

    def test_linear_closed_form(self):
        rng = np.random.default_rng(0)
        w, v, a = rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(4)
        if a @ v < 0:
            a = -a
        image = rng.standard_normal((1, 3, 6, 5))
        model = _LinearEncoder(w, v)
        acts = np.einsum("c,bchw->bhw", w, image)[0]
        # s = (a.v) * mean(A)  =>  ds/dA = (a.v) / (H*W) everywhere
        alpha = (a @ v) / 30
        expected = np.maximum(alpha * acts, 0)
        _, grads = gradcam_capture(model, torch.as_tensor(image), a, "feat")
        assert np.allclose(grads.numpy(), alpha, atol=1e-15)
        assert np.allclose(gradcam_raw(model, torch.as_tensor(image), a, "feat"), expected, atol=1e-12)

    def test_capture_gradients_finite_differences(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            model = self._model(seed)
            image = torch.as_tensor(rng.standard_normal((1, 3, 224, 224)))
            a = rng.standard_normal(64)
            a /= np.linalg.norm(a)
            _, grads = gradcam_capture(model, image, a, "block3.norm1")
            shape = grads.shape
            at = torch.as_tensor(a)

            def s(delta):
                with torch.no_grad():
                    emb = CaptureSession(model, "block3.norm1").forward(image, perturb=torch.as_tensor(delta.reshape(shape)))
                return float((emb[0] * at).sum().detach())

            idx = rng.choice(grads.numel(), 15, replace=False)
            fd = oracles.central_difference(s, np.zeros(grads.numel()), idx)
            assert oracles.max_rel_error(grads.numpy().reshape(-1)[idx], fd) < 1e-3

    def test_raw_nonnegative(self):
        raw = gradcam_raw(self._model(), torch.randn(1, 3, 224, 224, dtype=torch.float64), np.random.default_rng(1).standard_normal(64))
        assert raw.shape == (14, 14) and (raw >= 0).all()

    @pytest.mark.parametrize("scale", [0.5, 7.3])
    def test_scale_invariance(self, scale):
        rng = np.random.default_rng(3)
        model, image, a = self._model(), torch.as_tensor(rng.standard_normal((1, 3, 224, 224))), rng.standard_normal(64)
        base = localize_gradcam(model, image, a, 224, 224).values
        assert np.abs(localize_gradcam(model, image, scale * a, 224, 224).values - base).max() <= 1e-6

    def test_needs_capture_layer(self):
        vit = ToyModel(EncoderConfig(arch="vit")).image
        with pytest.raises(ConfigError):
            localize_gradcam(vit, torch.zeros(1, 3, 224, 224), np.ones(64), 224, 224)
        with pytest.raises(ConfigError):
            localize_gradcam(self._model(), torch.zeros(1, 3, 224, 224), np.ones(64), 224, 224, layer_id="nope")


def _random_stack(rng, layers=2, heads=2, tokens=10):
    logits = rng.standard_normal((layers, heads, tokens, tokens))
    attn = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    return AttentionStack(attn), rng.standard_normal(attn.shape)


class TestTransformerMM:
    def test_zero_gradients(self):
        attn, grads = _random_stack(np.random.default_rng(0), tokens=17)
        heat = localize_transformer_mm(attn, np.zeros_like(grads), 224, 224)
        assert not heat.values.any()

    def test_uniform_attention(self):
        t = 17
        attn = AttentionStack(np.full((1, 1, t, t), 1 / t))
        rel = relevancy(attn, np.ones((1, 1, t, t)))
        assert np.allclose(rel, np.eye(t) + np.full((t, t), 1 / t))
        assert not localize_transformer_mm(attn, np.ones((1, 1, t, t)), 32, 32).values.any()

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_rule_oracle(self, seed):
        rng = np.random.default_rng(seed)
        attn, grads = _random_stack(rng, tokens=17)
        rel = oracles.relevancy_rule(attn.maps.tolist(), grads.tolist())
        assert np.abs(relevancy(attn, grads) - np.array(rel)).max() < 1e-6
        patch = [rel[0][1 + 4 * r:1 + 4 * r + 4] for r in range(4)]
        expected = np.array(oracles.normalize(oracles.bilinear(patch, 40, 40)))
        heat = localize_transformer_mm(attn, grads, 40, 40)
        assert np.abs(heat.values - expected).max() < 1e-6

    def test_shape_mismatch(self):
        attn, grads = _random_stack(np.random.default_rng(0))
        with pytest.raises(ContractError):
            localize_transformer_mm(attn, grads[:, :1], 32, 32)

    def test_vit_end_to_end(self):
        model = ToyModel(EncoderConfig(arch="vit")).image.double()
        a = np.random.default_rng(0).standard_normal(64)
        attn, grads = attention_with_grads(model, torch.randn(1, 3, 224, 224), a)
        assert attn.maps.shape == grads.shape == (2, 2, 197, 197)
        assert np.abs(grads).sum() > 0
        _check_heatmap(localize_transformer_mm(attn, grads, 224, 224), 224, 224)


class TestRunLocalizer:
    def test_kind_aliases(self):
        assert LocalizerKind.parse("transformer_mm") is LocalizerKind.TMM
        with pytest.raises(ConfigError):
            LocalizerKind.parse("lrp")

    def test_incompatible_before_writing(self, vit_ckpt, quad_records, quad_dir, tmp_path):
        out = tmp_path / "preds"
        with pytest.raises(ConfigError):
            run_localizer("cossim", vit_ckpt, quad_records, out, quad_dir)
        assert not out.exists()

    @pytest.mark.parametrize("kind", ["cossim", "gradcam", "tmm"])
    def test_files_deterministic_and_evaluable(self, kind, conv_ckpt, vit_ckpt, quad_records, quad_dir, tmp_path):
        ckpt = vit_ckpt if kind == "tmm" else conv_ckpt
        records = quad_records[:3]
        first = run_localizer(kind, ckpt, records, tmp_path / "a", quad_dir)
        second = run_localizer(kind, ckpt, records, tmp_path / "b", quad_dir)
        assert sorted(p.name for p in first) == sorted(f"{r.frame_id}.hmp" for r in records)
        for p, q in zip(first, second):
            assert p.read_bytes() == q.read_bytes()
        preds = {p.stem: read_heatmap(p) for p in first}
        for h in preds.values():
            _check_heatmap(h, 224, 224)
        result = evaluate(preds, records, EvalConfig(ciou_threshold=0.3))
        assert 0.0 <= result.auc <= 1.0

import numpy as np
import pytest
import torch

from reference import ref_attention, ref_einfft, ref_layer_norm, ref_mlp, ref_mv
from mvhybrid.backbone import (HYBRIDS, BackboneConfig, ModelVariant, build_model, count_parameters, eigen_report,
                               export_weights, load_weights, make_variant)
from mvhybrid.errors import NoSSMBlocks, NonFinite, ShapeMismatch
from mvhybrid.gradcheck import sampled_parameter_check
from mvhybrid.mixers import DTYPE, AttentionMixer, EinFFTMixer, HydraMixer, MVMixer, ViMMixer


def images(n, size=64, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).normal(size=(n, 3, size, size)), dtype=DTYPE)


def tiny(variant="mv_hybrid", depth=4, channels=16, image=32, seed=0):
    base = make_variant(variant, "toy")
    half = depth // 2
    layout = (list(base.layout[:1]) * half + [("attention", "mlp")] * half) if variant in {v.value for v in HYBRIDS} \
        else [base.layout[0]] * depth
    cfg = BackboneConfig(image_size=image, patch_size=16 if image >= 32 else 8, channels=channels,
                         layout=tuple(layout), state_dim=4, dt_rank=4, heads=2, einfft_blocks=2, variant=variant)
    return build_model(cfg, seed)


class TestPatchEmbed:
    def test_token_count(self):
        model = build_model(make_variant("mv_hybrid"), seed=0)
        assert model.patch_embed(images(2)).shape == (2, 16, 64)

    def test_zero_image_gives_position_grid(self):
        model = build_model(make_variant("mv_hybrid"), seed=0)
        out = model.patch_embed(torch.zeros(1, 3, 64, 64, dtype=DTYPE))
        torch.testing.assert_close(out[0], model.patch_embed.pos, rtol=0, atol=0)

    def test_unfold_oracle(self):
        model = build_model(make_variant("vit12"), seed=1)
        pe = model.patch_embed
        with torch.no_grad():
            pe.proj_bias.copy_(torch.as_tensor(np.random.default_rng(3).normal(size=64)))
        img = images(2, seed=2)
        cols = torch.nn.functional.unfold(img, kernel_size=16, stride=16).transpose(1, 2)
        expected = cols @ pe.proj.T + pe.proj_bias + pe.pos
        torch.testing.assert_close(pe(img), expected, rtol=0, atol=1e-6)

    def test_loop_oracle(self):
        model = tiny("vit12", image=16)
        pe = model.patch_embed
        img = images(1, size=16, seed=4)
        P = pe.proj.detach().numpy()
        grid = 16 // 8
        rows = []
        for r in range(grid):
            for c in range(grid):
                patch = img[0, :, r * 8:(r + 1) * 8, c * 8:(c + 1) * 8].numpy().reshape(-1)
                rows.append(P @ patch)
        expected = np.array(rows) + pe.proj_bias.detach().numpy() + pe.pos.detach().numpy()
        np.testing.assert_allclose(pe(img)[0].detach().numpy(), expected, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("shape", [(1, 3, 48, 48), (1, 1, 64, 64), (3, 64, 64), (1, 3, 64, 32)])
    def test_bad_shape(self, shape):
        model = build_model(make_variant("mv_hybrid"), seed=0)
        with pytest.raises(ShapeMismatch):
            model.patch_embed(torch.zeros(shape, dtype=DTYPE))


class TestConfig:
    def test_indivisible_image(self):
        with pytest.raises(ShapeMismatch):
            BackboneConfig(image_size=60, patch_size=16)

    def test_depth_must_match_layout(self):
        with pytest.raises(ShapeMismatch):
            BackboneConfig(layout=(("mv", "einfft"),), depth=2)

    def test_hybrid_order_enforced(self):
        with pytest.raises(ValueError):
            BackboneConfig(layout=(("attention", "mlp"), ("mv", "einfft")), variant="mv_hybrid")

    def test_unknown_block(self):
        with pytest.raises(ValueError):
            BackboneConfig(layout=(("conv", "mlp"),))


class TestMakeVariant:
    def test_mv_hybrid_small(self):
        cfg = make_variant(ModelVariant.MV_HYBRID, "small")
        assert cfg.channels == 384 and cfg.depth == 24
        assert cfg.layout[:12] == (("mv", "einfft"),) * 12
        assert cfg.layout[12:] == (("attention", "mlp"),) * 12

    def test_vit24_small(self):
        cfg = make_variant("vit24", "small")
        assert cfg.channels == 384 and cfg.layout == (("attention", "mlp"),) * 24

    def test_vit12_toy(self):
        cfg = make_variant("vit12", "toy")
        assert cfg.channels == 64 and cfg.layout == (("attention", "mlp"),) * 4

    @pytest.mark.parametrize("variant", list(ModelVariant))
    def test_toy_depths(self, variant):
        cfg = make_variant(variant)
        assert cfg.depth == (4 if variant is ModelVariant.VIT12 else 8)
        assert cfg.channels == 64 and cfg.dt_rank == 16 and cfg.state_dim == 4

    def test_component_rows(self):
        assert set(make_variant("vim_einfft").layout) == {("vim", "einfft")}
        assert set(make_variant("hydra_einfft").layout) == {("hydra", "einfft")}
        assert make_variant("hydra_hybrid").layout[:4] == (("hydra", "einfft"),) * 4

    @pytest.mark.parametrize("variant", HYBRIDS)
    def test_hybrid_blocks_contain_the_right_weights(self, variant):
        model = build_model(make_variant(variant), seed=None)
        half = model.cfg.depth // 2
        for i, block in enumerate(model.blocks):
            ssm = isinstance(block.seq, (MVMixer, HydraMixer, ViMMixer)) or hasattr(block.seq, "A_log")
            attn = isinstance(block.seq, AttentionMixer)
            if i < half:
                assert ssm and not attn and isinstance(block.chan, EinFFTMixer)
            else:
                assert attn and not ssm and not isinstance(block.chan, EinFFTMixer)

    def test_small_parameter_ordering(self):
        counts = {v: count_parameters(build_model(make_variant(v, "small"), seed=None)) for v in ModelVariant}
        order = ["vit12", "hydra_einfft", "vim_einfft", "mv_hybrid", "hydra_hybrid", "vit24"]
        values = [counts[ModelVariant(v)] for v in order]
        assert values == sorted(values) and len(set(values)) == len(values)


class TestForward:
    @pytest.mark.parametrize("variant", list(ModelVariant))
    def test_embedding_dim(self, variant):
        model = build_model(make_variant(variant), seed=0)
        with torch.no_grad():
            tokens, emb = model(images(2))
        assert tokens.shape == (2, 16, 64) and emb.shape == (2, 64)

    def test_depth_zero(self):
        cfg = BackboneConfig(image_size=64, patch_size=16, channels=64, layout=())
        model = build_model(cfg, seed=5)
        with torch.no_grad():
            model.norm_w.copy_(torch.as_tensor(np.random.default_rng(6).normal(size=64)))
            model.norm_b.copy_(torch.as_tensor(np.random.default_rng(7).normal(size=64)))
            img = images(2, seed=8)
            _, emb = model(img)
            tok = model.patch_embed(img).numpy()
        expected = ref_layer_norm(tok, model.norm_w.detach().numpy(), model.norm_b.detach().numpy(), 1e-6).mean(1)
        np.testing.assert_allclose(emb.numpy(), expected, rtol=1e-10, atol=1e-12)

    def test_duplicate_rows_identical(self):
        model = build_model(make_variant("mv_hybrid"), seed=0)
        img = images(1, seed=9)
        with torch.no_grad():
            _, emb = model(torch.cat([img, images(1, seed=10), img]))
        assert torch.equal(emb[0], emb[2])

    def test_reproducible_bit_for_bit(self):
        img = images(2, seed=11)
        with torch.no_grad():
            a = build_model(make_variant("mv_hybrid"), seed=42)(img)[1]
            b = build_model(make_variant("mv_hybrid"), seed=42)(img)[1]
        assert torch.equal(a, b)

    def test_different_seed_changes_weights(self):
        a = export_weights(build_model(make_variant("mv_hybrid"), seed=1))
        b = export_weights(build_model(make_variant("mv_hybrid"), seed=2))
        assert not np.array_equal(a["patch_embed.proj"], b["patch_embed.proj"])

    def test_straight_line_reference(self):
        model = build_model(make_variant("mv_hybrid"), seed=42)
        rng = np.random.default_rng(12)
        with torch.no_grad():
            for name, p in model.named_parameters():
                if "norm" in name:
                    p.add_(torch.as_tensor(rng.normal(0, 0.1, tuple(p.shape))))
        img = images(2, seed=13)
        with torch.no_grad():
            _, emb = model(img)
            x = model.patch_embed(img)
        ref = {"mv": ref_mv, "attention": ref_attention, "einfft": ref_einfft, "mlp": ref_mlp}
        eps = model.cfg.norm_eps
        x = x.numpy()
        for (seq, chan), block in zip(model.cfg.layout, model.blocks):
            n = lambda v, w, b: torch.as_tensor(ref_layer_norm(v, w.detach().numpy(), b.detach().numpy(), eps))
            x = x + ref[seq](block.seq, n(x, block.norm1_w, block.norm1_b))
            x = x + ref[chan](block.chan, n(x, block.norm2_w, block.norm2_b))
        expected = ref_layer_norm(x, model.norm_w.detach().numpy(), model.norm_b.detach().numpy(), eps).mean(1)
        np.testing.assert_allclose(emb.numpy(), expected, rtol=0, atol=1e-5)

    def test_nonfinite_detected(self):
        model = build_model(make_variant("vit12"), seed=0)
        img = images(1)
        img[0, 0, 0, 0] = float("inf")
        with pytest.raises(NonFinite):
            with torch.no_grad():
                model(img)

    def test_wrong_image_size(self):
        with pytest.raises(ShapeMismatch):
            build_model(make_variant("mv_hybrid"), seed=0)(images(1, size=32))

    @pytest.mark.slow
    def test_finite_over_thousand_random_draws(self):
        variants = list(ModelVariant)
        models = {v: build_model(make_variant(v), seed=None).to_empty(device="cpu") for v in variants}
        failures = []
        for draw in range(1000):
            variant = variants[draw % len(variants)]
            model = models[variant]
            model.reset_parameters(np.random.Generator(np.random.PCG64(draw)))
            try:
                with torch.no_grad():
                    _, emb = model(images(1, seed=draw))
            except NonFinite:
                failures.append((variant.value, draw))
                continue
            if not torch.isfinite(emb).all():
                failures.append((variant.value, draw))
        assert failures == []

    @pytest.mark.parametrize("variant", ["mv_hybrid", "hydra_hybrid", "vim_einfft"])
    def test_sampled_gradient_check(self, variant):
        model = tiny(variant, seed=3)
        rng = np.random.default_rng(14)
        with torch.no_grad():
            model.norm_w.copy_(torch.as_tensor(rng.normal(size=model.cfg.channels)))
            model.norm_b.copy_(torch.as_tensor(rng.normal(size=model.cfg.channels)))
        img = images(1, size=32, seed=15)
        res = sampled_parameter_check(model, (img,), lambda out: out[1].sum(), fraction=0.05, seed=0)
        assert res.rel_error < 1e-3


class TestEigenReport:
    def test_cascaded_support(self):
        rep = eigen_report(build_model(make_variant("mv_hybrid"), seed=0))
        assert rep.support == [-4.0, -3.0, -2.0, -1.0]
        assert rep.count == 4 * 64 * 4
        assert rep.as_dict()["all_negative"]

    def test_uniform_support(self):
        rep = eigen_report(build_model(make_variant("hydra_hybrid"), seed=0))
        assert rep.support == [-1.0] and rep.minimum == rep.maximum == -1.0

    def test_histogram_bins(self):
        rep = eigen_report(build_model(make_variant("mv_hybrid"), seed=0), bins=3)
        assert len(rep.counts) == 3 and len(rep.edges) == 4 and sum(rep.counts) == rep.count

    def test_perturbation_stays_negative(self):
        model = build_model(make_variant("vim_einfft"), seed=0)
        rng = np.random.default_rng(16)
        with torch.no_grad():
            for mixer in model.ssm_mixers():
                for p in mixer.A_log:
                    p.add_(torch.as_tensor(rng.normal(0, 50, tuple(p.shape))))
        assert eigen_report(model).maximum < 0

    @pytest.mark.parametrize("variant", ["vit12", "vit24"])
    def test_no_ssm_blocks(self, variant):
        with pytest.raises(NoSSMBlocks):
            eigen_report(build_model(make_variant(variant), seed=0))


class TestWeights:
    def test_round_trip(self):
        src = build_model(make_variant("mv_hybrid"), seed=1)
        dst = build_model(make_variant("mv_hybrid"), seed=2)
        load_weights(dst, export_weights(src))
        img = images(1, seed=17)
        with torch.no_grad():
            assert torch.equal(src(img)[1], dst(img)[1])

    def test_shape_mismatch(self):
        weights = export_weights(build_model(make_variant("mv_hybrid"), seed=1))
        weights["norm_w"] = np.zeros(3)
        with pytest.raises(ShapeMismatch):
            load_weights(build_model(make_variant("mv_hybrid"), seed=1), weights)

    def test_missing_tensor(self):
        weights = export_weights(build_model(make_variant("mv_hybrid"), seed=1))
        weights.pop("norm_w")
        with pytest.raises(ShapeMismatch):
            load_weights(build_model(make_variant("mv_hybrid"), seed=1), weights)

import pytest
import torch

from bcqlm.errors import MaskError, ShapeError, VariantError
from bcqlm.pipeline.gradcheck import finite_diff_check
from bcqlm.qgcam import QGCAM, VARIANTS, adapt, compute_gate, cross_attend, fuse, fuse_variant, pool_text

D, HEADS, DEC = 16, 8, 12


def module(variant="standard", dec=DEC):
    torch.manual_seed(0)
    return QGCAM(D, HEADS, D, dec, variant).double()


def inputs(b=2, n=5, t=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    img = torch.randn(b, n, D, generator=g, dtype=torch.float64)
    txt = torch.randn(b, t, D, generator=g, dtype=torch.float64)
    return img, txt, torch.ones(b, t, dtype=torch.long)


class TestPool:
    def test_mean(self):
        out = pool_text(torch.tensor([[[1.0, 3.0], [3.0, 1.0]]]), torch.ones(1, 2))
        assert out.tolist() == [[2.0, 2.0]]

    def test_identical_tokens(self):
        tok = torch.randn(1, 1, 4).repeat(1, 3, 1)
        assert torch.allclose(pool_text(tok, torch.ones(1, 3)), tok[:, 0])

    def test_padding_ignored(self):
        _, txt, mask = inputs()
        padded = torch.cat([txt, torch.randn(2, 2, D, dtype=torch.float64)], 1)
        pmask = torch.cat([mask, torch.zeros(2, 2, dtype=torch.long)], 1)
        assert torch.allclose(pool_text(padded, pmask), pool_text(txt, mask), atol=1e-12)

    def test_all_masked(self):
        with pytest.raises(MaskError):
            pool_text(torch.randn(1, 3, 4), torch.zeros(1, 3))


class TestCrossAttention:
    def test_singleton_key(self):
        m = module()
        img, txt, _ = inputs()
        mask = torch.tensor([[0, 1, 0, 0], [1, 0, 0, 0]])
        out = cross_attend(img, txt, mask, m)
        v = m.cross.v(txt)
        expected = m.cross.out(torch.stack([v[0, 1], v[1, 0]])[:, None].expand(-1, 5, -1))
        assert torch.allclose(out, expected, atol=1e-12)

    def test_rows_sum_to_one(self):
        m = module()
        img, txt, _ = inputs()
        cross_attend(img, txt, torch.tensor([[1, 1, 0, 0], [1, 1, 1, 1]]), m)
        probs = m.cross.last_probs
        assert torch.allclose(probs.sum(-1), torch.ones_like(probs.sum(-1)), atol=1e-6)

    def test_uniform_keys_average_values(self):
        m = module()
        with torch.no_grad():
            m.cross.k.weight.zero_()
        img, txt, _ = inputs()
        mask = torch.tensor([[1, 1, 1, 0], [1, 1, 0, 0]])
        with torch.no_grad():
            m.cross.q.weight.mul_(7.0)
        out = cross_attend(img, txt, mask, m)
        mean_v = pool_text(m.cross.v(txt), mask)
        assert torch.allclose(out, m.cross.out(mean_v)[:, None].expand_as(out), atol=1e-10)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            cross_attend(torch.randn(1, 2, 8, dtype=torch.float64), *inputs(b=1)[1:], module())


class TestGate:
    def test_range(self):
        m = module()
        g = torch.Generator().manual_seed(1)
        for _ in range(10):
            img = 5 * torch.randn(100, 1, D, generator=g, dtype=torch.float64)
            gate = compute_gate(img, 5 * torch.randn(100, D, generator=g, dtype=torch.float64), m)
            assert bool(((gate > 0) & (gate < 1)).all())

    def test_zero_mlp_half(self):
        m = module()
        with torch.no_grad():
            for p in m.gate_mlp.parameters():
                p.zero_()
        img, txt, mask = inputs()
        assert bool((compute_gate(img, pool_text(txt, mask), m) == 0.5).all())

    def test_saturation(self):
        m = module()
        with torch.no_grad():
            m.gate_mlp.fc2.weight.zero_()
            m.gate_mlp.fc2.bias.fill_(20.0)
        img, txt, mask = inputs()
        assert bool((compute_gate(img, pool_text(txt, mask), m) > 0.999999).all())

    def test_question_dependent(self):
        m = module()
        img, txt, mask = inputs(b=1)
        img = img.repeat(2, 1, 1)
        txt = torch.cat([txt, torch.randn_like(txt)])
        gate = compute_gate(img, pool_text(txt, mask.repeat(2, 1)), m)
        assert not torch.allclose(gate[0], gate[1])

    def test_pooled_shape(self):
        img, _, _ = inputs()
        with pytest.raises(ShapeError):
            compute_gate(img, torch.randn(2, 3, D, dtype=torch.float64), module())


class TestFuse:
    def test_gate_zero_passthrough(self):
        m = module()
        img, txt, mask = inputs()
        out = fuse_variant("standard", img, txt, mask, m, gate_override=0.0)
        assert torch.equal(out.modulated, img)

    def test_gate_one(self):
        m = module()
        img, txt, mask = inputs()
        att = cross_attend(img, txt, mask, m)
        mod, _ = fuse(img, att, torch.ones(2, 5, 1, dtype=torch.float64), m)
        assert torch.equal(mod, img + att)

    def test_zero_ffn(self):
        m = module()
        with torch.no_grad():
            m.ffn.fc2.weight.zero_()
            m.ffn.fc2.bias.zero_()
        img, txt, mask = inputs()
        out = m(img, txt, mask)
        assert torch.allclose(out.fused, m.norm(out.modulated), atol=1e-12)

    def test_adapter_identity_and_bias(self):
        m = module(dec=D)
        fused = torch.randn(2, 5, D, dtype=torch.float64)
        with torch.no_grad():
            m.adapter.weight.copy_(torch.eye(D))
            m.adapter.bias.zero_()
        assert torch.equal(adapt(fused, m), fused)
        with torch.no_grad():
            m.adapter.weight.zero_()
            m.adapter.bias.fill_(0.25)
        assert bool((adapt(fused, m) == 0.25).all())

    def test_mask_invariance(self):
        m = module()
        img, txt, mask = inputs()
        base = m(img, txt, mask)
        ptxt = torch.cat([txt, 9 * torch.randn(2, 3, D, dtype=torch.float64)], 1)
        pmask = torch.cat([mask, torch.zeros(2, 3, dtype=torch.long)], 1)
        padded = m(img, ptxt, pmask)
        assert torch.allclose(base.attended, padded.attended, atol=1e-6)
        assert torch.allclose(base.gate, padded.gate, atol=1e-6)

    def test_patch_permutation(self):
        m = module()
        img, txt, mask = inputs()
        perm = torch.tensor([3, 0, 4, 1, 2])
        for kind in VARIANTS:
            a = fuse_variant(kind, img, txt, mask, m).pseudo
            b = fuse_variant(kind, img[:, perm], txt, mask, m).pseudo
            assert torch.allclose(a[:, perm], b, atol=1e-10), kind


class TestVariants:
    def test_shapes(self):
        m = module()
        img, txt, mask = inputs()
        shapes = {fuse_variant(k, img, txt, mask, m).pseudo.shape for k in VARIANTS}
        assert shapes == {torch.Size([2, 5, DEC])}

    def test_token_balance_norm_matched(self):
        m = module()
        img, txt, mask = inputs()
        txt = txt / txt.norm(dim=-1, keepdim=True) * 3.0
        img = img / img.norm(dim=-1, keepdim=True) * 3.0
        a = fuse_variant("standard", img, txt, mask, m).pseudo
        b = fuse_variant("token_balance", img, txt, mask, m).pseudo
        assert torch.allclose(a, b, atol=1e-6)

    def test_visual_query_zero_out(self):
        m = module()
        with torch.no_grad():
            m.vq_attn.out.weight.zero_()
            m.vq_attn.out.bias.zero_()
        img, txt, mask = inputs()
        assert torch.equal(fuse_variant("standard", img, txt, mask, m).pseudo,
                           fuse_variant("visual_query", img, txt, mask, m).pseudo)

    def test_unknown(self):
        with pytest.raises(VariantError):
            fuse_variant("mystery", *inputs(), module())
        with pytest.raises(VariantError):
            QGCAM(D, HEADS, D, DEC, "mystery")

    @pytest.mark.parametrize("kind", VARIANTS)
    def test_gradcheck(self, kind):
        assert finite_diff_check(f"qgcam.{kind}") < 1e-4

import math

import numpy as np
import pytest
import torch

from bcqlm.alignment import (
    ArchiveTeacher,
    EmbeddingBatch,
    FrozenRandomTeacher,
    ProjectionHeads,
    TeacherEmbeddings,
    contrastive_loss,
    distill_loss,
    l2_normalize,
    project_teacher,
    teacher_embed,
    total_loss,
)
from bcqlm.errors import ShapeError, TeacherLookupError
from bcqlm.pipeline.gradcheck import finite_diff_check


def unit(b, d, seed=0):
    g = torch.Generator().manual_seed(seed)
    return l2_normalize(torch.randn(b, d, generator=g, dtype=torch.float64))


def reference_infonce(i, t, tau, alpha):
    """Loop-based reading of the bidirectional InfoNCE objective."""
    i = i / np.linalg.norm(i, axis=1, keepdims=True)
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    s = i @ t.T / tau
    b = len(s)
    ce_it = -sum(s[k, k] - math.log(sum(math.exp(x) for x in s[k])) for k in range(b)) / b
    ce_ti = -sum(s[k, k] - math.log(sum(math.exp(x) for x in s[:, k])) for k in range(b)) / b
    return (ce_it + ce_ti) / alpha


class TestContrastive:
    def test_singleton_zero(self):
        e = EmbeddingBatch(unit(1, 4), unit(1, 4, 1))
        assert float(contrastive_loss(e, 0.07, 0.5)) == 0.0

    def test_orthonormal_pair(self):
        eye = torch.eye(2, dtype=torch.float64)
        loss = float(contrastive_loss(EmbeddingBatch(eye, eye), 1.0, 0.5))
        # closed form (1/alpha) * 2 * ln(1 + e^-1) = 1.2530467..., which the
        # commonly quoted 1.253048 misses by 1.25e-6 (rounding)
        assert abs(loss - 4 * math.log(1 + math.exp(-1))) < 1e-12
        assert round(loss, 6) == 1.253047

    def test_all_equal(self):
        v = torch.ones(2, 3, dtype=torch.float64)
        assert abs(float(contrastive_loss(EmbeddingBatch(v, v), 1.0, 0.5)) - 2.772589) < 1e-6

    def test_matches_loop_reference(self):
        i, t = unit(5, 8, 1), unit(5, 8, 2)
        ours = float(contrastive_loss(EmbeddingBatch(i, t), 0.3, 0.5))
        assert abs(ours - reference_infonce(i.numpy(), t.numpy(), 0.3, 0.5)) < 1e-10

    def test_swap_symmetry(self):
        i, t = unit(6, 8, 1), unit(6, 8, 2)
        assert torch.allclose(contrastive_loss(EmbeddingBatch(i, t), 0.1, 0.5),
                              contrastive_loss(EmbeddingBatch(t, i), 0.1, 0.5), atol=1e-12)

    def test_row_permutation(self):
        i, t = unit(6, 8, 1), unit(6, 8, 2)
        perm = torch.randperm(6)
        a = contrastive_loss(EmbeddingBatch(i, t), 0.1, 0.5)
        b = contrastive_loss(EmbeddingBatch(i[perm], t[perm]), 0.1, 0.5)
        assert abs(float(a - b)) < 1e-6

    def test_minimum_at_identity(self):
        i = unit(6, 8, 3)
        base = float(contrastive_loss(EmbeddingBatch(i, i), 0.1, 0.5))
        for s in range(10):
            perm = torch.randperm(6, generator=torch.Generator().manual_seed(s))
            assert base <= float(contrastive_loss(EmbeddingBatch(i, i[perm]), 0.1, 0.5)) + 1e-12

    def test_normalises_inputs(self):
        i, t = unit(4, 8, 1), unit(4, 8, 2)
        assert torch.allclose(contrastive_loss(EmbeddingBatch(3 * i, 0.5 * t), 0.1, 0.5),
                              contrastive_loss(EmbeddingBatch(i, t), 0.1, 0.5))

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            contrastive_loss(EmbeddingBatch(unit(2, 4), unit(2, 4)), 0.0, 0.5)


class TestDistill:
    def test_identity_zero(self):
        raw_i, raw_t = 2 * unit(3, 4, 1), 3 * unit(3, 4, 2)
        target = (l2_normalize(raw_i), l2_normalize(raw_t))
        assert float(distill_loss(EmbeddingBatch(raw_i, raw_t), target, 0.5)) == 0.0

    def test_antipodal(self):
        i, t = unit(3, 4, 1), unit(3, 4, 2)
        assert abs(float(distill_loss(EmbeddingBatch(-i, -t), (i, t), 0.5)) - 4.0) < 1e-6

    def test_beta_scaling(self):
        i, t = unit(3, 4, 1), unit(3, 4, 2)
        s = EmbeddingBatch(unit(3, 4, 3), unit(3, 4, 4))
        assert torch.allclose(distill_loss(s, (i, t), 1.0), distill_loss(s, (i, t), 0.5) / 2)

    def test_non_negative(self):
        for k in range(5):
            s = EmbeddingBatch(unit(4, 6, k), unit(4, 6, k + 10))
            assert float(distill_loss(s, (unit(4, 6, k + 20), unit(4, 6, k + 30)), 0.5)) >= 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            distill_loss(EmbeddingBatch(unit(3, 4), unit(3, 4)), (unit(3, 5), unit(3, 5)), 0.5)


class TestTotal:
    @pytest.mark.parametrize("l1,l2,lc,ld,expected", [(1, 1, 2, 3, 5), (0.7, 0.3, 2, 1, 1.7)])
    def test_values(self, l1, l2, lc, ld, expected):
        assert total_loss(lc, ld, l1, l2) == pytest.approx(expected, abs=1e-12)

    def test_pure_contrastive(self):
        lc, ld = torch.tensor(2.5), torch.tensor(9.0)
        assert torch.equal(total_loss(lc, ld, 0.8, 0.0), 0.8 * lc)

    def test_exact_linearity(self):
        lc, ld = torch.tensor(1.2345), torch.tensor(0.777)
        assert torch.equal(total_loss(lc, ld, 1.0, 1.0), lc + ld)


class TestTeacher:
    def test_identity_head(self):
        heads = ProjectionHeads(4, 4).double()
        with torch.no_grad():
            for h in (heads.image_head, heads.text_head):
                h.weight.copy_(torch.eye(4))
                h.bias.zero_()
        x = unit(3, 4)
        img, txt = project_teacher(TeacherEmbeddings(x, x, "t"), heads)
        assert torch.allclose(img, x) and torch.allclose(txt, x)

    def test_constant_head(self):
        heads = ProjectionHeads(5, 4).double()
        with torch.no_grad():
            heads.image_head.weight.zero_()
            heads.image_head.bias.copy_(torch.tensor([1.0, 0, 0, 0]))
        img, _ = project_teacher(TeacherEmbeddings(unit(3, 5), unit(3, 5), "t"), heads)
        assert torch.equal(img, torch.tensor([[1.0, 0, 0, 0]] * 3, dtype=torch.float64))

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            project_teacher(TeacherEmbeddings(unit(2, 3), unit(2, 3), "t"), ProjectionHeads(4, 4).double())

    def test_frozen_teacher_repeatable(self, tiny):
        teacher = FrozenRandomTeacher(tiny.vocab_size, tiny.teacher_dim)
        batch = {"images": torch.randn(2, 3, 96, 96), "ids": torch.randint(4, 20, (2, 6)),
                 "mask": torch.ones(2, 6, dtype=torch.long)}
        a, b = teacher_embed(batch, teacher), teacher_embed(batch, teacher)
        assert torch.equal(a.image, b.image) and torch.equal(a.text, b.text)
        assert not any(p.requires_grad for p in teacher.parameters())
        assert torch.equal(FrozenRandomTeacher(tiny.vocab_size, tiny.teacher_dim).conv1.weight, teacher.conv1.weight)

    def test_archive_lookup(self):
        entries = {"teacher/image/a": np.arange(3.0), "teacher/text/a": np.ones(3)}
        out = teacher_embed({"item_ids": ["a"]}, ArchiveTeacher(entries))
        assert out.image.tolist() == [[0.0, 1.0, 2.0]]
        with pytest.raises(TeacherLookupError):
            ArchiveTeacher(entries).lookup(["b"])

    def test_head_gradcheck(self):
        assert finite_diff_check("alignment") < 1e-4

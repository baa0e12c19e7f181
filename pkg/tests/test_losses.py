import copy
import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from cfcontrast.losses import (
    DinoHyper, DinoState, dino_loss, ema_update, nt_xent, simclr_pair_index, update_dino_center,
)


def brute_nt_xent(z, pairs, t):
    """Term-by-term loop over anchors with plain Python floats."""
    z = [np.asarray(v, dtype=np.float64) for v in z]
    sim = lambda a, b: float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    total = 0.0
    for i in range(len(z)):
        num = math.exp(sim(z[i], z[pairs[i]]) / t)
        den = sum(math.exp(sim(z[i], z[k]) / t) for k in range(len(z)) if k != i)
        total += -math.log(num / den)
    return total / len(z)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.1, 0.5, 1.0]))
def test_nt_xent_matches_brute_force(seed, t):
    z = torch.randn(8, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    pairs = simclr_pair_index(4).tolist()
    assert abs(nt_xent(z, temperature=t).item() - brute_nt_xent(z.numpy(), pairs, t)) <= 1e-6


def test_custom_matching_matches_brute_force():
    z = torch.randn(6, 3, dtype=torch.float64)
    pairs = [3, 5, 4, 0, 2, 1]
    assert abs(nt_xent(z, pairs, 0.3).item() - brute_nt_xent(z.numpy(), pairs, 0.3)) <= 1e-9


def test_single_pair_loss_is_zero():
    z = torch.tensor([[1.0, 2.0], [-3.0, 0.5]], dtype=torch.float64)
    assert nt_xent(z).item() == 0.0


def test_self_similarity_is_one():
    from cfcontrast.losses import cosine_similarity_matrix
    z = torch.randn(5, 4, dtype=torch.float64)
    np.testing.assert_allclose(torch.diag(cosine_similarity_matrix(z)).numpy(), 1.0, atol=1e-12)


def test_zero_vector_rejected():
    with pytest.raises(ValueError, match="zero-norm"):
        nt_xent(torch.tensor([[0.0, 0.0], [1.0, 0.0]]))


@pytest.mark.parametrize("bad", [[1, 0, 2], [0, 1, 2, 3], [1, 2, 3, 0]])
def test_bad_matchings_rejected(bad):
    n = len(bad) + (len(bad) % 2)
    with pytest.raises(ValueError):
        nt_xent(torch.randn(max(n, len(bad)), 3), bad)


def test_scale_invariance():
    z = torch.randn(8, 4, dtype=torch.float64)
    scale = torch.rand(8, 1, dtype=torch.float64) * 10 + 0.1
    assert abs(nt_xent(z).item() - nt_xent(z * scale).item()) < 1e-12


def test_relabelling_pairs_is_symmetric():
    z = torch.randn(8, 4, dtype=torch.float64)
    perm = torch.randperm(8)
    inv = torch.argsort(perm)
    pairs = simclr_pair_index(4)
    new_pairs = inv[pairs[perm]]
    assert abs(nt_xent(z).item() - nt_xent(z[perm], new_pairs).item()) < 1e-12


def test_gradient_matches_finite_differences():
    z = torch.randn(8, 5, dtype=torch.float64, requires_grad=True)
    nt_xent(z, temperature=0.5).backward()
    h = 1e-6
    fd = torch.zeros_like(z)
    with torch.no_grad():
        for i in range(8):
            for j in range(5):
                zp, zm = z.clone(), z.clone()
                zp[i, j] += h
                zm[i, j] -= h
                fd[i, j] = (nt_xent(zp) - nt_xent(zm)) / (2 * h)
    rel = (z.grad - fd).norm() / fd.norm()
    assert rel.item() <= 1e-4


# -- DINO -------------------------------------------------------------------


def _state(p=6, **hyper):
    return DinoState(nn.Identity(), nn.Identity(), p, DinoHyper(**hyper))


def test_dino_equals_teacher_entropy_when_views_match():
    s = _state(student_temp=0.07, teacher_temp=0.07)
    t = torch.randn(4, 6, dtype=torch.float64)
    s.center = s.center.double()
    loss = dino_loss(s, [t, t], [t] * 10, update_center=False)
    q = torch.softmax(t / 0.07, -1)
    entropy = -(q * q.log()).sum(-1).mean()
    assert abs(loss.item() - entropy.item()) < 1e-10


def test_dino_one_hot_limit_is_zero():
    s = _state(student_temp=0.1, teacher_temp=0.1)
    t = torch.zeros(3, 6)
    t[torch.arange(3), torch.tensor([0, 2, 5])] = 50.0
    assert dino_loss(s, [t, t], [t] * 10, update_center=False).item() < 1e-6


def test_dino_invariant_to_local_view_order():
    s = _state()
    g = [torch.randn(4, 6) for _ in range(2)]
    locs = [torch.randn(4, 6) for _ in range(8)]
    a = dino_loss(s, g, g + locs, update_center=False)
    b = dino_loss(s, g, g + locs[::-1], update_center=False)
    assert torch.allclose(a, b, atol=1e-6)


def test_dino_skips_same_view_pairs():
    # two teacher globals x (2 globals + 0 locals) -> only the cross terms count
    s = _state(student_temp=0.1, teacher_temp=0.1)
    t0, t1 = torch.randn(2, 6), torch.randn(2, 6)
    loss = dino_loss(s, [t0, t1], [t0, t1], update_center=False)
    q0, q1 = torch.softmax(t0 / 0.1, -1), torch.softmax(t1 / 0.1, -1)
    l0, l1 = torch.log_softmax(t0 / 0.1, -1), torch.log_softmax(t1 / 0.1, -1)
    expected = 0.5 * (-(q0 * l1).sum(-1).mean() - (q1 * l0).sum(-1).mean())
    assert torch.allclose(loss, expected, atol=1e-6)


def test_dino_prototype_mismatch():
    with pytest.raises(ValueError, match="prototype"):
        dino_loss(_state(p=6), [torch.randn(2, 5)], [torch.randn(2, 5)] * 2)


def test_center_update_is_ema_of_batch_mean():
    s = _state(center_momentum=0.9)
    t = [torch.ones(4, 6) * 2, torch.ones(4, 6) * 4]
    update_dino_center(s, t)
    assert torch.allclose(s.center, torch.full((1, 6), 0.3))


def test_teacher_does_not_require_grad():
    student = nn.Linear(3, 3)
    s = DinoState(student, copy.deepcopy(student), 3)
    assert not any(p.requires_grad for p in s.teacher.parameters())


@pytest.mark.parametrize("m, expected", [(0.0, 0.0), (0.9, 0.9), (1.0, 1.0)])
def test_ema_exact(m, expected):
    teacher, student = nn.Linear(1, 1, bias=False).double(), nn.Linear(1, 1, bias=False).double()
    teacher.weight.data.fill_(1.0)
    student.weight.data.fill_(0.0)
    ema_update(teacher, student, m)
    assert teacher.weight.item() == expected


def test_ema_on_tensors_elementwise():
    teacher, student = nn.Linear(4, 3), nn.Linear(4, 3)
    t0 = [p.clone() for p in teacher.parameters()]
    ema_update(teacher, student, 0.25)
    for t, old, s in zip(teacher.parameters(), t0, student.parameters()):
        assert torch.allclose(t, 0.25 * old + 0.75 * s)


def test_ema_rejects_out_of_range():
    with pytest.raises(ValueError):
        ema_update(nn.Linear(1, 1), nn.Linear(1, 1), 1.5)

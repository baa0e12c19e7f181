"""Contrastive objectives: NT-Xent, DINO self-distillation, EMA teacher updates."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def simclr_pair_index(n: int) -> torch.Tensor:
    """Partner of each row when views are stacked as [a_0..a_{n-1}, b_0..b_{n-1}]."""
    return torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])


def cosine_similarity_matrix(z: torch.Tensor) -> torch.Tensor:
    norms = z.norm(dim=1)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm projection vector: cosine similarity undefined")
    u = z / norms[:, None]
    return u @ u.T


def nt_xent(z, pair_index=None, temperature: float = 0.5) -> torch.Tensor:
    """Mean over all 2N anchors of

        -log exp(sim(z_i, z_j)/t) / sum_{k != i} exp(sim(z_i, z_k)/t)

    where j = pair_index[i].  ``z`` is ``(2N, d)``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z = torch.as_tensor(z)
    m = z.shape[0]
    if pair_index is None:
        pair_index = simclr_pair_index(m // 2)
    pair_index = torch.as_tensor(pair_index, dtype=torch.long)
    if m % 2 or pair_index.shape[0] != m:
        raise ValueError("pair_index must be a perfect matching over an even number of rows")
    ar = torch.arange(m)
    if bool((pair_index[pair_index] != ar).any()) or bool((pair_index == ar).any()):
        raise ValueError("pair_index must be a perfect matching")
    logits = cosine_similarity_matrix(z) / temperature
    self_mask = torch.eye(m, dtype=torch.bool)
    logits = logits.masked_fill(self_mask, float("-inf"))
    log_prob = logits[ar, pair_index] - torch.logsumexp(logits, dim=1)
    return -log_prob.mean()


@dataclass
class DinoHyper:
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    momentum: float = 0.96


class DinoState(nn.Module):
    """Student, EMA teacher and the output center."""

    def __init__(self, student: nn.Module, teacher: nn.Module, out_dim: int, hyper: DinoHyper | None = None):
        super().__init__()
        self.student = student
        self.teacher = teacher
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.hyper = hyper or DinoHyper()
        self.register_buffer("center", torch.zeros(1, out_dim))


def dino_loss(state: DinoState, teacher_out, student_out, update_center: bool = True) -> torch.Tensor:
    """Cross-entropy from centred/sharpened teacher globals to every other student view.

    ``teacher_out``: list of ``(B, P)`` logits, global views only.
    ``student_out``: list of ``(B, P)`` logits for all views, the globals first
    and in the same order as ``teacher_out``.
    """
    h = state.hyper
    if h.student_temp <= 0 or h.teacher_temp <= 0:
        raise ValueError("temperatures must be > 0")
    p_dim = state.center.shape[-1]
    for t in list(teacher_out) + list(student_out):
        if t.shape[-1] != p_dim:
            raise ValueError(f"prototype dimension {t.shape[-1]} does not match center {p_dim}")
    targets = [F.softmax((t.detach() - state.center) / h.teacher_temp, dim=-1) for t in teacher_out]
    log_students = [F.log_softmax(s / h.student_temp, dim=-1) for s in student_out]
    total, terms = 0.0, 0
    for iq, q in enumerate(targets):
        for v, ls in enumerate(log_students):
            if v == iq:
                continue
            total = total + (-(q * ls).sum(-1)).mean()
            terms += 1
    loss = total / terms
    if update_center:
        update_dino_center(state, teacher_out)
    return loss


@torch.no_grad()
def update_dino_center(state: DinoState, teacher_out):
    batch_center = torch.cat([t.detach() for t in teacher_out]).mean(0, keepdim=True)
    m = state.hyper.center_momentum
    state.center.mul_(m).add_(batch_center, alpha=1 - m)


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> nn.Module:
    """teacher <- m * teacher + (1 - m) * student, tensor by tensor."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    for t, s in zip(teacher.parameters(), student.parameters()):
        t.mul_(momentum).add_(s.detach(), alpha=1.0 - momentum)
    for t, s in zip(teacher.buffers(), student.buffers()):
        if t.dtype.is_floating_point:
            t.mul_(momentum).add_(s, alpha=1.0 - momentum)
        else:
            t.copy_(s)
    return teacher


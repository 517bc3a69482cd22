"""Finite-difference verification across the differentiable surface.

Runs in float64 with small fixtures: primitive ops, the prompt
composition, a full backbone forward, and the three-term distillation
loss end to end. The CLI's gradcheck command prints one line per check.
"""

from __future__ import annotations

import numpy as np

from .backbone import BackboneCheckpoint, BackboneConfig, forward_with_prompt
from .distillery import DistillConfig, distill_loss
from .ndtensor import (
    GradCheckReport, Tensor, causal_attention, concat_rows, cross_entropy, gather_rows,
    gelu, gradcheck, hadamard, kl_divergence_rows, layernorm_rows, matmul, mean_all,
    mse, no_grad, outer, slice_rows, softmax_rows, sum_all, transpose,
)
from .promptkit import TargetAdapter, TaskFactors, compose_prompt, compose_target_prompt


def _t(rng, *shape, grad=True) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=grad, dtype=np.float64)


def _tiny_backbone(seed: int) -> BackboneCheckpoint:
    cfg = BackboneConfig(vocab_size=13, d_model=8, n_layers=2, n_heads=2,
                         d_ff=16, max_seq_len=32)
    return BackboneCheckpoint.init_random(cfg, seed).astype(np.float64)


def run_gradcheck_suite(seed: int = 0, rel_tol: float = 1e-4) -> list[tuple[str, GradCheckReport]]:
    rng = np.random.default_rng(seed)
    reports: list[tuple[str, GradCheckReport]] = []

    A = _t(rng, 4, 5)
    B = _t(rng, 5, 3)
    reports.append(("matmul", gradcheck(lambda: sum_all(matmul(A, B)), {"A": A, "B": B},
                                        rel_tol=rel_tol)))

    H = _t(rng, 3, 4)
    reports.append(("hadamard", gradcheck(lambda: sum_all(hadamard(H, H)), {"H": H},
                                          rel_tol=rel_tol)))

    logits = _t(rng, 5, 7)
    tgt = rng.integers(0, 7, size=5)
    mask = np.array([True, False, True, True, False])
    reports.append(("cross_entropy", gradcheck(
        lambda: cross_entropy(logits, tgt, mask), {"logits": logits}, rel_tol=rel_tol)))

    with no_grad():
        p_fixed = softmax_rows(_t(rng, 4, 6, grad=False))
    Q = _t(rng, 4, 6)
    kl_mask = np.array([True, True, False, True])
    reports.append(("kl_divergence", gradcheck(
        lambda: kl_divergence_rows(p_fixed, softmax_rows(Q), kl_mask), {"Q": Q},
        rel_tol=rel_tol)))

    X = _t(rng, 4, 6)
    gamma = Tensor(np.ones(6), requires_grad=True, dtype=np.float64)
    beta = Tensor(np.zeros(6), requires_grad=True, dtype=np.float64)
    ref = _t(rng, 4, 6, grad=False)
    ln_mask = np.array([True, False, True, True])
    reports.append(("layernorm_gelu_mse", gradcheck(
        lambda: mse(layernorm_rows(gelu(X), gamma, beta), ref, ln_mask),
        {"X": X, "gamma": gamma, "beta": beta}, rel_tol=rel_tol)))

    Qa = _t(rng, 6, 8)
    Ka = _t(rng, 6, 8)
    Va = _t(rng, 6, 8)
    reports.append(("causal_attention", gradcheck(
        lambda: mean_all(causal_attention(Qa, Ka, Va, 2)), {"Q": Qa, "K": Ka, "V": Va},
        rel_tol=rel_tol)))

    T = _t(rng, 4, 3)
    u2 = _t(rng, 2)
    v3 = _t(rng, 3)
    W = _t(rng, 3, 3, grad=False)
    reports.append(("structural_ops", gradcheck(
        lambda: sum_all(hadamard(
            slice_rows(concat_rows(gather_rows(T, [0, 2, 1]), outer(u2, v3)), 2, 5),
            transpose(W))),
        {"T": T, "u": u2, "v": v3}, rel_tol=rel_tol)))

    P_star = _t(rng, 3, 8)
    U = _t(rng, 3, 1)
    V = _t(rng, 1, 8)
    weight = _t(rng, 3, 8, grad=False)
    factors = TaskFactors("NER", U, V)
    reports.append(("compose_prompt", gradcheck(
        lambda: sum_all(hadamard(compose_prompt(P_star, factors), weight)),
        {"P_star": P_star, "U": U, "V": V}, rel_tol=rel_tol)))

    ut = _t(rng, 3)
    vt = _t(rng, 8)
    adapter = TargetAdapter("t", "NER", ut, vt)
    reports.append(("compose_target_prompt", gradcheck(
        lambda: sum_all(hadamard(compose_target_prompt(P_star, adapter), weight)),
        {"P_star": P_star, "u_t": ut, "v_t": vt}, rel_tol=rel_tol)))

    # Full backbone: cross-entropy through every layer, all weights trainable.
    net = _tiny_backbone(seed + 1)
    for p in net.params.values():
        p.requires_grad = True
    ids_in = [1, 4, 7, 5]
    ids_tg = [9, 2]

    def net_loss():
        fp = forward_with_prompt(net, None, ids_in, ids_tg)
        return cross_entropy(fp.logits, fp.targets, fp.loss_mask)

    reports.append(("backbone_forward", gradcheck(
        net_loss, dict(net.params), rel_tol=rel_tol, max_checks_per_param=4, seed=seed)))

    # Distillation loss end to end: gradients reach P*, U, V through the
    # student forward; the teacher pass is recorded outside the graph.
    frozen = _tiny_backbone(seed + 2)
    teacher_prompt = _t(rng, 3, 8, grad=False)
    with no_grad():
        teacher_fp = forward_with_prompt(frozen, teacher_prompt, ids_in, ids_tg)
    dcfg = DistillConfig()

    def distill_total():
        student_fp = forward_with_prompt(frozen, compose_prompt(P_star, factors), ids_in, ids_tg)
        total, _, _, _ = distill_loss(teacher_fp, student_fp, student_fp.targets,
                                      student_fp.loss_mask, dcfg)
        return total

    reports.append(("distill_loss", gradcheck(
        distill_total, {"P_star": P_star, "U": U, "V": V}, rel_tol=rel_tol)))

    return reports


def suite_ok(reports: list[tuple[str, GradCheckReport]]) -> bool:
    return all(r.ok for _, r in reports)


def suite_max_error(reports: list[tuple[str, GradCheckReport]]) -> float:
    return max(r.max_rel_error for _, r in reports)

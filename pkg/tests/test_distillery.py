"""Teacher prompt training, joint distillation, and the task sampler."""

import csv
import math

import numpy as np
import pytest

import promptdistill.distillery as distillery
from promptdistill.backbone import BackboneCheckpoint, BackboneConfig, ForwardPass
from promptdistill.distillery import (
    DistillConfig,
    LossRow,
    distill_loss,
    epoch_means,
    sample_tasks,
    train_shared_prompt,
    train_teacher,
    write_loss_csv,
)
from promptdistill.errors import ContractError
from promptdistill.ndtensor import PROB_FLOOR, Tensor
from promptdistill.optim import AdamW
from promptdistill.promptkit import TeacherPrompt, param_count
from promptdistill.taskforge import TASK_TYPES, WorldSpec, generate_task_corpus, generate_world

# -----------------------------------------------------------------------
# Fixtures: a tiny world and frozen backbone so training tests run fast
# -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldSpec(seed=3))


@pytest.fixture(scope="module")
def ckpt(world):
    cfg = BackboneConfig(vocab_size=len(world.tokenizer.tokens), d_model=16,
                         n_layers=1, n_heads=2, d_ff=32, max_seq_len=96)
    ck = BackboneCheckpoint.init_random(cfg, seed=0, tokenizer=world.tokenizer)
    ck.freeze()
    return ck


@pytest.fixture(scope="module")
def corpora(world):
    return {t: generate_task_corpus(world, t, 20, "source", seed=10 + i)
            for i, t in enumerate(TASK_TYPES)}


@pytest.fixture(scope="module")
def fast_config():
    return DistillConfig(prompt_len=4, rank=1, epochs_stage1=2, epochs_stage2=2,
                         batch_stage1=8, batch_stage2=8, subsample_cap=16)


@pytest.fixture(scope="module")
def teachers(ckpt, corpora, fast_config):
    return {t: train_teacher(ckpt, corpora[t], fast_config, seed=20 + i)[0]
            for i, t in enumerate(TASK_TYPES)}


# -----------------------------------------------------------------------
# Task sampler distribution
# -----------------------------------------------------------------------


def test_sampler_k_frequencies_uniform():
    # Monte-Carlo check: each subset size must come up a quarter of the time.
    rng = np.random.default_rng(123)
    n = 10_000
    counts = {k: 0 for k in (2, 3, 4, 5)}
    for _ in range(n):
        counts[len(sample_tasks((2, 3, 4, 5), rng))] += 1
    for k, c in counts.items():
        assert abs(c / n - 0.25) <= 0.02, f"K={k} frequency {c / n:.4f}"


def test_sampler_draws_are_canonical_distinct_subsets():
    rng = np.random.default_rng(7)
    for _ in range(500):
        drawn = sample_tasks((2, 3, 4, 5), rng)
        assert len(drawn) == len(set(drawn))
        assert set(drawn) <= set(TASK_TYPES)
        # canonical order: the subsequence order of TASK_TYPES is preserved
        idx = [TASK_TYPES.index(t) for t in drawn]
        assert idx == sorted(idx)


def test_sampler_single_choice_is_constant():
    rng = np.random.default_rng(0)
    assert all(len(sample_tasks((3,), rng)) == 3 for _ in range(50))


def test_sampler_task_marginals_uniform():
    # With K uniform on {2..5} and tasks drawn without replacement, each
    # task appears with probability E[K]/5 = 0.7.
    rng = np.random.default_rng(99)
    n = 10_000
    hits = {t: 0 for t in TASK_TYPES}
    for _ in range(n):
        for t in sample_tasks((2, 3, 4, 5), rng):
            hits[t] += 1
    for t, c in hits.items():
        assert abs(c / n - 0.7) <= 0.02, f"{t} marginal {c / n:.4f}"


def test_sampler_deterministic_under_seed():
    a = [sample_tasks((2, 3, 4, 5), np.random.default_rng(42)) for _ in range(1)]
    b = [sample_tasks((2, 3, 4, 5), np.random.default_rng(42)) for _ in range(1)]
    assert a == b


# -----------------------------------------------------------------------
# Distillation loss
# -----------------------------------------------------------------------


def _make_pass(rng, n_prompt, n_tok, vocab, *, requires_grad=False, dtype=np.float64):
    n = n_prompt + n_tok
    logits = Tensor(rng.normal(size=(n, vocab)).astype(dtype), requires_grad=requires_grad)
    hidden = Tensor(rng.normal(size=(n, 6)).astype(dtype), requires_grad=requires_grad)
    mask = np.zeros(n, dtype=bool)
    mask[n_prompt + 1:] = True  # supervise everything after the first token
    targets = np.zeros(n, dtype=np.int64)
    targets[mask] = rng.integers(0, vocab, size=int(mask.sum()))
    return ForwardPass(logits, hidden, mask, targets, n_prompt)


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_distill_loss_matches_hand_computation():
    rng = np.random.default_rng(5)
    teacher = _make_pass(rng, 3, 5, 11)
    student = ForwardPass(Tensor(rng.normal(size=(8, 11))), Tensor(rng.normal(size=(8, 6))),
                          teacher.loss_mask, teacher.targets, 3)
    cfg = DistillConfig(lambda1=0.5, lambda2=0.5)
    total, task, logit, hidden = distill_loss(teacher, student, student.targets,
                                              student.loss_mask, cfg)

    m = student.loss_mask
    ps, pt = _softmax(student.logits.data), _softmax(teacher.logits.data)
    want_task = float(np.mean(-np.log(ps[m, student.targets[m]] + PROB_FLOOR)))
    want_logit = float(np.mean(
        (pt[m] * (np.log(pt[m] + PROB_FLOOR) - np.log(ps[m] + PROB_FLOOR))).sum(axis=1)))
    tok = np.arange(8) >= 3
    diff = teacher.final_hidden.data[tok] - student.final_hidden.data[tok]
    want_hidden = float((diff * diff).sum() / diff.size)

    assert task.item() == pytest.approx(want_task, rel=1e-12)
    assert logit.item() == pytest.approx(want_logit, rel=1e-12)
    assert hidden.item() == pytest.approx(want_hidden, rel=1e-12)
    assert total.item() == pytest.approx(want_task + 0.5 * want_logit + 0.5 * want_hidden,
                                         rel=1e-12)


@pytest.mark.parametrize("l1,l2", [(0.5, 0.5), (2.0, 0.25), (0.0, 0.0), (1.0, 0.0)])
def test_distill_loss_combination_weights(l1, l2):
    rng = np.random.default_rng(8)
    teacher = _make_pass(rng, 2, 4, 9)
    student = ForwardPass(Tensor(rng.normal(size=(6, 9))), Tensor(rng.normal(size=(6, 6))),
                          teacher.loss_mask, teacher.targets, 2)
    cfg = DistillConfig(lambda1=l1, lambda2=l2)
    total, task, logit, hidden = distill_loss(teacher, student, student.targets,
                                              student.loss_mask, cfg)
    assert total.item() == pytest.approx(
        task.item() + l1 * logit.item() + l2 * hidden.item(), rel=1e-12)


def test_distill_loss_hidden_term_skips_prompt_rows():
    rng = np.random.default_rng(1)
    teacher = _make_pass(rng, 3, 4, 7)
    # student identical except the prompt rows of the hidden states
    s_hidden = teacher.final_hidden.data.copy()
    s_hidden[:3] += 10.0
    student = ForwardPass(Tensor(teacher.logits.data.copy()), Tensor(s_hidden),
                          teacher.loss_mask, teacher.targets, 3)
    _, _, logit, hidden = distill_loss(teacher, student, student.targets,
                                       student.loss_mask, DistillConfig())
    assert hidden.item() == 0.0
    assert logit.item() == pytest.approx(0.0, abs=1e-12)

    # perturbing a token row does register
    s_hidden2 = teacher.final_hidden.data.copy()
    s_hidden2[5] += 1.0
    student2 = ForwardPass(Tensor(teacher.logits.data.copy()), Tensor(s_hidden2),
                           teacher.loss_mask, teacher.targets, 3)
    _, _, _, hidden2 = distill_loss(teacher, student2, student2.targets,
                                    student2.loss_mask, DistillConfig())
    assert hidden2.item() > 0.0


def test_distill_loss_identical_outputs_leave_only_task_term():
    rng = np.random.default_rng(2)
    teacher = _make_pass(rng, 2, 5, 13)
    student = ForwardPass(Tensor(teacher.logits.data.copy()),
                          Tensor(teacher.final_hidden.data.copy()),
                          teacher.loss_mask, teacher.targets, 2)
    total, task, logit, hidden = distill_loss(teacher, student, student.targets,
                                              student.loss_mask, DistillConfig())
    assert hidden.item() == 0.0
    assert logit.item() == pytest.approx(0.0, abs=1e-12)
    assert task.item() > 0.0
    assert total.item() == pytest.approx(task.item(), rel=1e-12)


def test_distill_loss_rejects_prompt_length_mismatch():
    rng = np.random.default_rng(3)
    teacher = _make_pass(rng, 3, 4, 7)
    student = ForwardPass(teacher.logits, teacher.final_hidden,
                          teacher.loss_mask, teacher.targets, 2)
    with pytest.raises(ContractError, match="prompt lengths"):
        distill_loss(teacher, student, student.targets, student.loss_mask, DistillConfig())


def test_distill_loss_rejects_logits_shape_mismatch():
    rng = np.random.default_rng(4)
    teacher = _make_pass(rng, 3, 4, 7)
    student = ForwardPass(Tensor(rng.normal(size=(7, 9))), teacher.final_hidden,
                          teacher.loss_mask, teacher.targets, 3)
    with pytest.raises(ContractError, match="logits"):
        distill_loss(teacher, student, student.targets, student.loss_mask, DistillConfig())


def test_distill_loss_gradients_reach_student_not_teacher():
    rng = np.random.default_rng(6)
    teacher = _make_pass(rng, 2, 4, 9)
    student = _make_pass(np.random.default_rng(7), 2, 4, 9, requires_grad=True)
    student = ForwardPass(student.logits, student.final_hidden,
                          teacher.loss_mask, teacher.targets, 2)
    total, *_ = distill_loss(teacher, student, student.targets, student.loss_mask,
                             DistillConfig())
    total.backward()
    assert student.logits.grad is not None and np.any(student.logits.grad != 0)
    assert student.final_hidden.grad is not None and np.any(student.final_hidden.grad != 0)
    assert teacher.logits.grad is None
    assert teacher.final_hidden.grad is None


# -----------------------------------------------------------------------
# Config validation
# -----------------------------------------------------------------------


@pytest.mark.parametrize("kwargs", [
    {"lambda1": -0.1},
    {"lambda2": -1.0},
    {"K_choices": ()},
    {"K_choices": (0, 2)},
    {"K_choices": (2, 6)},
    {"prompt_len": 0},
    {"rank": 0},
])
def test_distill_config_validation(kwargs):
    with pytest.raises(ContractError):
        DistillConfig(**kwargs)


# -----------------------------------------------------------------------
# Loss bookkeeping
# -----------------------------------------------------------------------


def _row(epoch, step, total):
    return LossRow(2, epoch, step, "NER", total, 0.0, 0.0, total)


def test_epoch_means_hand_case():
    rows = [_row(1, 1, 1.0), _row(1, 2, 3.0), _row(2, 3, 0.5), _row(2, 4, 1.5), _row(3, 5, 2.0)]
    assert epoch_means(rows) == {1: 2.0, 2: 1.0, 3: 2.0}


def test_loss_csv_round_trip(tmp_path):
    rows = [LossRow(1, 1, 1, "QA", 0.123456789, 0.0, 0.0, 0.123456789),
            LossRow(2, 3, 17, "SUM", 1.5, 0.25, 0.125, 1.6875)]
    path = tmp_path / "loss.csv"
    write_loss_csv(path, rows)
    with open(path, newline="") as fh:
        got = list(csv.reader(fh))
    assert got[0] == ["stage", "epoch", "step", "task_type", "task_loss",
                      "logit_loss", "hidden_loss", "total"]
    assert got[1] == ["1", "1", "1", "QA", "0.123457", "0.000000", "0.000000", "0.123457"]
    assert got[2] == ["2", "3", "17", "SUM", "1.500000", "0.250000", "0.125000", "1.687500"]
    assert len(got) == 3


# -----------------------------------------------------------------------
# Stage 1: teacher training
# -----------------------------------------------------------------------


def test_train_teacher_output_shape_and_rows(ckpt, corpora, fast_config):
    tp, rows = train_teacher(ckpt, corpora["NER"], fast_config, seed=5)
    assert isinstance(tp, TeacherPrompt)
    assert tp.task_type == "NER"
    assert tp.P_k.data.shape == (fast_config.prompt_len, ckpt.config.d_model)
    assert tp.P_k.data.dtype == np.float32
    assert not tp.P_k.requires_grad
    assert rows
    assert all(r.stage == 1 and r.task_type == "NER" for r in rows)
    assert all(r.logit_loss == 0.0 and r.hidden_loss == 0.0 for r in rows)
    assert all(r.total == r.task_loss and math.isfinite(r.total) for r in rows)
    assert [r.step for r in rows] == list(range(1, len(rows) + 1))
    assert {r.epoch for r in rows} == set(range(1, fast_config.epochs_stage1 + 1))


def test_train_teacher_leaves_backbone_untouched(ckpt, corpora, fast_config):
    before = ckpt.compute_hash()
    train_teacher(ckpt, corpora["RE"], fast_config, seed=6)
    assert ckpt.compute_hash() == before
    assert ckpt.content_hash == before


def test_train_teacher_deterministic(ckpt, corpora, fast_config):
    a, _ = train_teacher(ckpt, corpora["QA"], fast_config, seed=9)
    b, _ = train_teacher(ckpt, corpora["QA"], fast_config, seed=9)
    c, _ = train_teacher(ckpt, corpora["QA"], fast_config, seed=10)
    assert a.P_k.data.tobytes() == b.P_k.data.tobytes()
    assert c.P_k.data.tobytes() != a.P_k.data.tobytes()


def test_train_teacher_validations(ckpt, corpora, fast_config):
    with pytest.raises(ContractError, match="empty"):
        train_teacher(ckpt, [], fast_config, seed=0)
    mixed = corpora["NER"][:2] + corpora["RE"][:2]
    with pytest.raises(ContractError, match="mixes"):
        train_teacher(ckpt, mixed, fast_config, seed=0)
    thawed = ckpt.clone(trainable=True)
    with pytest.raises(ContractError, match="frozen"):
        train_teacher(thawed, corpora["NER"], fast_config, seed=0)


def test_train_teacher_respects_subsample_cap(ckpt, corpora):
    cfg = DistillConfig(prompt_len=4, epochs_stage1=1, batch_stage1=4, subsample_cap=8)
    _, rows = train_teacher(ckpt, corpora["NLI"], cfg, seed=3)
    # 8 capped records at batch 4 means exactly 2 steps in the single epoch
    assert len(rows) == 2


# -----------------------------------------------------------------------
# Stage 2: joint distillation
# -----------------------------------------------------------------------


def test_train_shared_prompt_shapes_and_freeze(ckpt, teachers, corpora, fast_config):
    meta, factors, rows = train_shared_prompt(ckpt, teachers, corpora, fast_config)
    L, d = fast_config.prompt_len, ckpt.config.d_model
    assert meta.P_star.data.shape == (L, d)
    assert not meta.P_star.requires_grad
    assert set(factors) == set(TASK_TYPES)
    for t, f in factors.items():
        assert f.task_type == t
        assert f.U.data.shape == (L, fast_config.rank)
        assert f.V.data.shape == (fast_config.rank, d)
        assert not f.U.requires_grad and not f.V.requires_grad
    assert rows and all(r.stage == 2 for r in rows)
    assert {r.epoch for r in rows} == set(range(1, fast_config.epochs_stage2 + 1))
    for r in rows:
        assert r.task_type in TASK_TYPES
        assert math.isfinite(r.total)
        assert r.task_loss >= 0 and r.logit_loss >= -1e-6 and r.hidden_loss >= 0
        assert r.total == pytest.approx(
            r.task_loss + fast_config.lambda1 * r.logit_loss
            + fast_config.lambda2 * r.hidden_loss, abs=2e-6)


def test_train_shared_prompt_deterministic(ckpt, teachers, corpora, fast_config):
    m1, f1, r1 = train_shared_prompt(ckpt, teachers, corpora, fast_config)
    m2, f2, r2 = train_shared_prompt(ckpt, teachers, corpora, fast_config)
    assert m1.P_star.data.tobytes() == m2.P_star.data.tobytes()
    for t in TASK_TYPES:
        assert f1[t].U.data.tobytes() == f2[t].U.data.tobytes()
        assert f1[t].V.data.tobytes() == f2[t].V.data.tobytes()
    assert r1 == r2


@pytest.mark.parametrize("rank", [1, 2])
def test_stage2_trainable_registry_matches_formula(ckpt, teachers, corpora, monkeypatch, rank):
    # Count the scalars that actually enter the optimizer; the registry must
    # equal the shared matrix plus one factor pair per task, nothing else.
    cfg = DistillConfig(prompt_len=4, rank=rank, epochs_stage2=1,
                        batch_stage2=8, subsample_cap=8)
    captured = {}

    class SpyAdamW(AdamW):
        def __init__(self, params, **kw):
            captured.update(params)
            super().__init__(params, **kw)

    monkeypatch.setattr(distillery, "AdamW", SpyAdamW)
    train_shared_prompt(ckpt, teachers, corpora, cfg)

    assert all(p.requires_grad is False for p in captured.values())  # released after
    L, d = cfg.prompt_len, ckpt.config.d_model
    measured = sum(int(p.data.size) for p in captured.values())
    want = L * d + len(TASK_TYPES) * (L * rank + rank * d)
    assert measured == want
    if rank == 1:
        assert measured == param_count(L, d, tau=len(TASK_TYPES), mode="group_total")
    assert set(captured) == {"P_star"} | {f"U_{t}" for t in TASK_TYPES} \
        | {f"V_{t}" for t in TASK_TYPES}


def test_train_shared_prompt_leaves_backbone_untouched(ckpt, teachers, corpora, fast_config):
    before = ckpt.compute_hash()
    train_shared_prompt(ckpt, teachers, corpora, fast_config)
    assert ckpt.compute_hash() == before


def test_train_shared_prompt_validations(ckpt, teachers, corpora, fast_config):
    short = {t: p for t, p in teachers.items() if t != "SUM"}
    with pytest.raises(ContractError, match="missing teacher"):
        train_shared_prompt(ckpt, short, corpora, fast_config)
    empty = dict(corpora)
    empty["QA"] = []
    with pytest.raises(ContractError, match="missing corpora"):
        train_shared_prompt(ckpt, teachers, empty, fast_config)
    thawed = ckpt.clone(trainable=True)
    with pytest.raises(ContractError, match="frozen"):
        train_shared_prompt(thawed, teachers, corpora, fast_config)
    odd = dict(teachers)
    odd["QA"] = TeacherPrompt("QA", Tensor(np.zeros((7, ckpt.config.d_model), dtype=np.float32)))
    with pytest.raises(ContractError, match="lengths differ"):
        train_shared_prompt(ckpt, odd, corpora, fast_config)


def test_teacher_cache_reuses_forward_passes(ckpt, teachers, corpora):
    cache = distillery._TeacherCache(ckpt, teachers)
    rec = corpora["NER"][0]
    a = cache.get("NER", 0, rec)
    b = cache.get("NER", 0, rec)
    assert a is b  # second lookup is a cache hit, not a recompute
    assert not a.logits.requires_grad
    assert not a.final_hidden.requires_grad
    c = cache.get("NER", 1, corpora["NER"][1])
    assert c is not a

"""Prompt-tuning, LoRA, and full fine-tuning baselines."""

import numpy as np
import pytest

import promptdistill.optim as optim
from promptdistill.adapter import AdaptConfig
from promptdistill.backbone import (
    BackboneCheckpoint,
    BackboneConfig,
    forward_with_prompt,
)
from promptdistill.baselines import (
    LoraAdapter,
    baseline_fullft,
    baseline_lora,
    baseline_pt,
    fewshot_lora,
    fewshot_pt,
    load_pt_prompt,
    percent_trainable,
    sample_shots,
    save_pt_prompt,
)
from promptdistill.errors import ContractError, ParseError
from promptdistill.ndtensor import Tensor
from promptdistill.promptkit import init_prompt_from_vocab
from promptdistill.taskforge import WorldSpec, encode_record, generate_task_corpus, generate_world


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldSpec(seed=3))


@pytest.fixture(scope="module")
def ckpt(world):
    cfg = BackboneConfig(vocab_size=len(world.tokenizer.tokens), d_model=16,
                         n_layers=2, n_heads=2, d_ff=32, max_seq_len=96)
    ck = BackboneCheckpoint.init_random(cfg, seed=0, tokenizer=world.tokenizer)
    ck.freeze()
    return ck


@pytest.fixture(scope="module")
def corpus(world):
    return generate_task_corpus(world, "RE", 20, "target", seed=2)


@pytest.fixture()
def fast_adapt():
    return AdaptConfig(prompt_len=4, max_epochs=2, batch=8, fewshot_steps=5,
                       n_draws=2, eval_max_new=4)


class _SpyAdamW(optim.AdamW):
    steps = 0
    registry: dict = {}

    def __init__(self, params, **kw):
        type(self).registry = dict(params)
        super().__init__(params, **kw)

    def step(self):
        type(self).steps += 1
        super().step()

    @classmethod
    def reset(cls):
        cls.steps = 0
        cls.registry = {}


@pytest.fixture()
def spy_optimizer(monkeypatch):
    _SpyAdamW.reset()
    # every trainer resolves AdamW through the optim module
    monkeypatch.setattr(optim, "AdamW", _SpyAdamW)
    import promptdistill.baselines as baselines_mod
    import promptdistill.training as training_mod
    monkeypatch.setattr(training_mod, "AdamW", _SpyAdamW)
    return _SpyAdamW


# -----------------------------------------------------------------------
# LoRA adapter mechanics
# -----------------------------------------------------------------------


def test_fresh_lora_is_bitwise_noop(ckpt, corpus):
    input_ids, target_ids = encode_record(ckpt.tokenizer, corpus[0])
    base = forward_with_prompt(ckpt, None, input_ids, target_ids)
    la = LoraAdapter(ckpt.config, r=2, seed=7)
    with_lora = forward_with_prompt(ckpt, None, input_ids, target_ids, lora=la)
    assert base.logits.data.tobytes() == with_lora.logits.data.tobytes()


def test_trained_lora_changes_the_forward_pass(ckpt, corpus):
    la = LoraAdapter(ckpt.config, r=2, seed=7)
    B, _ = la.pairs[(0, "q")]
    # non-constant fill: a constant column is annihilated by the zero-mean
    # rows that layer normalization feeds into the projections
    B.data[...] = np.random.default_rng(0).normal(0.0, 0.5, size=B.data.shape)
    input_ids, target_ids = encode_record(ckpt.tokenizer, corpus[0])
    base = forward_with_prompt(ckpt, None, input_ids, target_ids)
    moved = forward_with_prompt(ckpt, None, input_ids, target_ids, lora=la)
    assert not np.array_equal(base.logits.data, moved.logits.data)


def test_lora_rank_validation(ckpt):
    with pytest.raises(ContractError, match="positive"):
        LoraAdapter(ckpt.config, r=0, seed=0)
    with pytest.raises(ContractError, match="exceeds"):
        LoraAdapter(ckpt.config, r=17, seed=0)


def test_lora_scaling_and_counts(ckpt):
    la = LoraAdapter(ckpt.config, r=2, seed=0)
    assert la.scaling == 1.0  # alpha defaults to r
    assert LoraAdapter(ckpt.config, r=2, seed=0, alpha=8.0).scaling == 4.0
    d, r, layers = ckpt.config.d_model, 2, ckpt.config.n_layers
    assert la.n_trainable() == layers * 2 * (d * r + r * d)
    assert set(la.params()) == {f"layer{i}.{w}.{p}"
                                for i in range(layers) for w in ("q", "v") for p in ("B", "A")}


def test_lora_b_starts_zero_a_random(ckpt):
    la = LoraAdapter(ckpt.config, r=2, seed=3)
    for (_, _), (B, A) in la.pairs.items():
        assert not B.data.any()
        assert A.data.any()
        assert B.requires_grad and A.requires_grad
    la.set_trainable(False)
    assert all(not B.requires_grad and not A.requires_grad
               for B, A in la.pairs.values())


def test_lora_save_load_round_trip(ckpt, tmp_path):
    la = LoraAdapter(ckpt.config, r=2, seed=9)
    la.pairs[(1, "v")][0].data[...] = 0.25
    path = tmp_path / "adapter.lora"
    la.save(path)
    back = LoraAdapter.load(path, ckpt.config)
    assert back.r == la.r and back.alpha == la.alpha
    for key in la.pairs:
        for orig, loaded in zip(la.pairs[key], back.pairs[key]):
            assert orig.data.tobytes() == loaded.data.tobytes()
            assert not loaded.requires_grad


def test_lora_load_rejects_other_containers(ckpt, tmp_path):
    path = tmp_path / "p.bin"
    save_pt_prompt(path, Tensor(np.zeros((2, 4), dtype=np.float32)), task="x")
    with pytest.raises(ParseError, match="not a lora container"):
        LoraAdapter.load(path, ckpt.config)


# -----------------------------------------------------------------------
# PT prompt persistence and bookkeeping helpers
# -----------------------------------------------------------------------


def test_pt_prompt_round_trip(tmp_path):
    prompt = Tensor(np.arange(8, dtype=np.float32).reshape(2, 4))
    path = tmp_path / "prompt.pt.bin"
    save_pt_prompt(path, prompt, task="re-target")
    task, back = load_pt_prompt(path)
    assert task == "re-target"
    assert back.data.tobytes() == prompt.data.tobytes()


def test_pt_prompt_load_rejects_other_containers(ckpt, tmp_path):
    la = LoraAdapter(ckpt.config, r=1, seed=0)
    path = tmp_path / "x.bin"
    la.save(path)
    with pytest.raises(ParseError, match="not a pt prompt"):
        load_pt_prompt(path)


def test_percent_trainable(ckpt):
    assert percent_trainable(ckpt.n_parameters(), ckpt) == 100.0
    assert percent_trainable(0, ckpt) == 0.0
    d, L = ckpt.config.d_model, 8
    assert percent_trainable(L * d, ckpt) == pytest.approx(100.0 * L * d / ckpt.n_parameters())


# -----------------------------------------------------------------------
# Shot sampling
# -----------------------------------------------------------------------


def test_sample_shots_draws_k_distinct_records(corpus):
    train = [r for r in corpus if r.split == "train"]
    shots = sample_shots(train, 5, np.random.default_rng(0))
    assert len(shots) == 5
    assert len({id(s) for s in shots}) == 5
    assert all(s in train for s in shots)


def test_sample_shots_k0_and_determinism(corpus):
    train = [r for r in corpus if r.split == "train"]
    assert sample_shots(train, 0, np.random.default_rng(0)) == []
    a = sample_shots(train, 3, np.random.default_rng(11))
    b = sample_shots(train, 3, np.random.default_rng(11))
    assert a == b


def test_sample_shots_validation(corpus):
    train = [r for r in corpus if r.split == "train"]
    with pytest.raises(ContractError, match="negative"):
        sample_shots(train, -1, np.random.default_rng(0))
    with pytest.raises(ContractError, match="exceeds"):
        sample_shots(train, len(train) + 1, np.random.default_rng(0))


# -----------------------------------------------------------------------
# Full-data baselines
# -----------------------------------------------------------------------


def test_baseline_pt_trains_full_prompt_matrix(ckpt, corpus, fast_adapt):
    before = ckpt.compute_hash()
    prompt, info = baseline_pt(ckpt, corpus, fast_adapt, seed=1)
    assert prompt.data.shape == (fast_adapt.prompt_len, ckpt.config.d_model)
    assert prompt.data.dtype == np.float32
    assert not prompt.requires_grad
    assert info["n_trainable"] == fast_adapt.prompt_len * ckpt.config.d_model
    assert info["params_pct"] == pytest.approx(
        100.0 * info["n_trainable"] / ckpt.n_parameters())
    assert info["best_epoch"] >= 0
    assert len(info["val_losses"]) >= 1
    assert ckpt.compute_hash() == before


def test_baseline_pt_requires_frozen_backbone(ckpt, corpus, fast_adapt):
    thawed = ckpt.clone(trainable=True)
    with pytest.raises(ContractError, match="frozen"):
        baseline_pt(thawed, corpus, fast_adapt, seed=0)


def test_baseline_lora_counts_and_freeze(ckpt, corpus, fast_adapt):
    before = ckpt.compute_hash()
    la, info = baseline_lora(ckpt, corpus, 2, fast_adapt, seed=1)
    assert info["n_trainable"] == la.n_trainable()
    assert all(not B.requires_grad and not A.requires_grad for B, A in la.pairs.values())
    assert ckpt.compute_hash() == before
    thawed = ckpt.clone(trainable=True)
    with pytest.raises(ContractError, match="frozen"):
        baseline_lora(thawed, corpus, 2, fast_adapt, seed=0)


def test_baseline_fullft_clones_and_preserves_original(ckpt, corpus, fast_adapt):
    before = ckpt.compute_hash()
    tuned, info = baseline_fullft(ckpt, corpus, fast_adapt, seed=1)
    assert tuned is not ckpt
    assert tuned.frozen
    assert ckpt.compute_hash() == before  # the original is never touched
    assert info["n_trainable"] == ckpt.n_parameters()
    assert info["params_pct"] == 100.0


# -----------------------------------------------------------------------
# Few-shot baselines: fixed step budget, zero steps at k = 0
# -----------------------------------------------------------------------


def test_fewshot_pt_k0_returns_untouched_init(ckpt, corpus, fast_adapt, spy_optimizer):
    prompt = fewshot_pt(ckpt, corpus, 0, draw_seed=42, config=fast_adapt)
    init = init_prompt_from_vocab(ckpt, fast_adapt.prompt_len, 42)
    assert prompt.data.tobytes() == init.data.tobytes()
    assert spy_optimizer.steps == 0


def test_fewshot_pt_runs_exact_step_budget(ckpt, corpus, fast_adapt, spy_optimizer):
    prompt = fewshot_pt(ckpt, corpus, 1, draw_seed=42, config=fast_adapt)
    assert spy_optimizer.steps == fast_adapt.fewshot_steps
    init = init_prompt_from_vocab(ckpt, fast_adapt.prompt_len, 42)
    assert prompt.data.tobytes() != init.data.tobytes()
    assert set(spy_optimizer.registry) == {"prompt"}
    assert not prompt.requires_grad


def test_fewshot_lora_k0_is_noop_adapter(ckpt, corpus, fast_adapt, spy_optimizer):
    la = fewshot_lora(ckpt, corpus, 2, 0, draw_seed=7, config=fast_adapt)
    assert spy_optimizer.steps == 0
    assert all(not B.data.any() for B, _ in la.pairs.values())


def test_fewshot_lora_trains_for_exact_budget(ckpt, corpus, fast_adapt, spy_optimizer):
    la = fewshot_lora(ckpt, corpus, 2, 5, draw_seed=7, config=fast_adapt)
    assert spy_optimizer.steps == fast_adapt.fewshot_steps
    assert any(B.data.any() for B, _ in la.pairs.values())
    assert all(not B.requires_grad for B, _ in la.pairs.values())


def test_fewshot_pt_deterministic(ckpt, corpus, fast_adapt):
    a = fewshot_pt(ckpt, corpus, 5, draw_seed=3, config=fast_adapt)
    b = fewshot_pt(ckpt, corpus, 5, draw_seed=3, config=fast_adapt)
    c = fewshot_pt(ckpt, corpus, 5, draw_seed=4, config=fast_adapt)
    assert a.data.tobytes() == b.data.tobytes()
    assert c.data.tobytes() != a.data.tobytes()

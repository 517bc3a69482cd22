"""Flat key=value run configuration with a closed key schema.

Every tunable in the pipeline has exactly one key. Unknown keys are
rejected so a typo cannot silently fall back to a default, and every
config canonicalizes to a single serialized form for run provenance.
"""

from __future__ import annotations

from .adapter import AdaptConfig
from .backbone import SPECIAL_TOKENS, BackboneConfig
from .distillery import DistillConfig
from .errors import ContractError, ParseError
from .taskforge import WorldSpec


def _parse_bool(s: str) -> bool:
    if s == "true":
        return True
    if s == "false":
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p != "")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    # world and corpora
    "world_seed": (int, 0),
    "base_vocab": (int, 64),
    "n_source_entities": (int, 10),
    "n_target_entities": (int, 6),
    "n_triggers": (int, 4),
    "n_relations": (int, 4),
    "type_fact_reps": (int, 6),
    "n_relation_facts": (int, 900),
    "antonym_fact_reps": (int, 4),
    "label_fact_reps": (int, 2),
    "n_cooccur": (int, 240),
    "n_induction": (int, 200),
    "n_task_demos": (int, 300),
    "n_source_records": (int, 360),
    "n_target_records": (int, 200),
    # backbone
    "d_model": (int, 32),
    "n_layers": (int, 2),
    "n_heads": (int, 2),
    "d_ff": (int, 64),
    "max_seq_len": (int, 160),
    "tied": (_parse_bool, False),
    "pretrain_epochs": (int, 45),
    "pretrain_lr": (float, 3e-3),
    "pretrain_batch": (int, 16),
    "pretrain_prefix_max": (int, 12),
    "pretrain_seed": (int, 0),
    # stages 1 and 2
    "prompt_len": (int, 8),
    "rank": (int, 1),
    "lambda1": (float, 0.5),
    "lambda2": (float, 0.5),
    "k_choices": (_parse_ints, (2, 3, 4, 5)),
    "epochs_stage1": (int, 5),
    "lr_stage1": (float, 0.05),
    "batch_stage1": (int, 32),
    "epochs_stage2": (int, 10),
    "lr_stage2": (float, 0.01),
    "batch_stage2": (int, 32),
    "subsample_cap": (int, 512),
    "weight_decay": (float, 0.01),
    "stage_seed": (int, 0),
    # stage 3 and few-shot protocol
    "adapt_max_epochs": (int, 10),
    "adapt_lr": (float, 0.01),
    "adapt_patience": (int, 2),
    "adapt_batch": (int, 32),
    "fewshot_steps": (int, 50),
    "fewshot_k": (_parse_ints, (0, 1, 5, 10, 20)),
    "n_draws": (int, 10),
    "seed_base": (int, 1000),
    "batch_cap": (int, 8),
    "fullft_lr": (float, 1e-4),
    # baselines and evaluation
    "lora_rank": (int, 2),
    "methods": (str, "mpt,pt,lora"),
    "eval_max_new": (int, 64),
}


class RunConfig:
    def __init__(self, overrides: dict | None = None):
        self._values = {k: default for k, (_, default) in SCHEMA.items()}
        for k, v in (overrides or {}).items():
            if k not in SCHEMA:
                raise ContractError(f"unknown config key {k!r}")
            self._values[k] = v

    def __getattr__(self, key):
        values = object.__getattribute__(self, "_values")
        if key in values:
            return values[key]
        raise AttributeError(key)

    @classmethod
    def from_text(cls, text: str, origin: str = "<config>") -> "RunConfig":
        overrides = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, eq, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if not eq:
                raise ParseError(f"{origin}:{lineno}: expected key=value, got {raw!r}")
            if key not in SCHEMA:
                raise ContractError(f"{origin}:{lineno}: unknown config key {key!r}")
            if key in overrides:
                raise ContractError(f"{origin}:{lineno}: duplicate config key {key!r}")
            parser = SCHEMA[key][0]
            try:
                overrides[key] = parser(val)
            except ValueError as exc:
                raise ParseError(f"{origin}:{lineno}: bad value for {key}: {exc}") from exc
        return cls(overrides)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read(), origin=str(path))

    def canonical_text(self) -> str:
        return "".join(f"{k}={_fmt(self._values[k])}\n" for k in sorted(SCHEMA))

    # -- derived module configs ------------------------------------------

    def world_spec(self) -> WorldSpec:
        return WorldSpec(
            seed=self.world_seed, base_vocab=self.base_vocab,
            n_source_entities=self.n_source_entities, n_target_entities=self.n_target_entities,
            n_triggers=self.n_triggers, n_relations=self.n_relations,
            type_fact_reps=self.type_fact_reps, n_relation_facts=self.n_relation_facts,
            antonym_fact_reps=self.antonym_fact_reps, label_fact_reps=self.label_fact_reps,
            n_cooccur=self.n_cooccur, n_induction=self.n_induction,
            n_task_demos=self.n_task_demos,
        )

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            vocab_size=self.base_vocab + len(SPECIAL_TOKENS), d_model=self.d_model,
            n_layers=self.n_layers, n_heads=self.n_heads, d_ff=self.d_ff,
            max_seq_len=self.max_seq_len, tied=self.tied,
        )

    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            prompt_len=self.prompt_len, rank=self.rank,
            lambda1=self.lambda1, lambda2=self.lambda2, K_choices=self.k_choices,
            epochs_stage1=self.epochs_stage1, lr_stage1=self.lr_stage1,
            batch_stage1=self.batch_stage1, epochs_stage2=self.epochs_stage2,
            lr_stage2=self.lr_stage2, batch_stage2=self.batch_stage2,
            subsample_cap=self.subsample_cap, weight_decay=self.weight_decay,
            seed=self.stage_seed,
        )

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(
            prompt_len=self.prompt_len, max_epochs=self.adapt_max_epochs,
            lr=self.adapt_lr, patience=self.adapt_patience, batch=self.adapt_batch,
            fewshot_steps=self.fewshot_steps, fewshot_k=self.fewshot_k,
            n_draws=self.n_draws, seed=self.stage_seed, seed_base=self.seed_base,
            batch_cap=self.batch_cap, weight_decay=self.weight_decay,
            fullft_lr=self.fullft_lr, eval_max_new=self.eval_max_new,
        )

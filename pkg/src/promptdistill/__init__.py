"""Multitask soft-prompt distillation on a tiny frozen decoder-only transformer.

Pipeline: synthetic five-task benchmark generation, brief backbone
pretraining, per-task teacher prompt training, joint distillation into a
shared meta-prompt with per-task low-rank factors, rank-1 adaptation to
unseen target tasks, plus PT / LoRA / full fine-tuning baselines and a
seeded few-shot evaluation harness.
"""

__version__ = "0.1.0"

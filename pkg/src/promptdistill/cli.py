"""Command-line pipeline: data generation through reports and figures.

Exit codes: 0 success, 2 contract violation (bad input, malformed file),
3 numeric failure (NaN, divergence, failed gradient verification).
Machine-readable outputs go to files; stdout carries progress only.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import adapter as adapter_mod
from . import baselines as baselines_mod
from .backbone import BackboneCheckpoint, pretrain_backbone, read_container
from .config import RunConfig
from .distillery import epoch_means, train_shared_prompt, train_teacher, write_loss_csv
from .errors import ContractError, NumericError
from .evaluation import evaluate_records
from .metrics import (
    EvalOutcome, ReportRow, aggregate_report, read_outcomes_jsonl, write_outcomes_jsonl,
    write_report_tsv,
)
from .ndtensor import fnv1a64
from .promptkit import (
    compose_target_prompt, compress_adapter, load_adapter, load_compressed, load_factors,
    load_meta, load_teacher, param_count, save_adapter, save_compressed, save_factors,
    save_meta, save_teacher,
)
from .taskforge import TASK_TYPES, generate_task_corpus, generate_world, read_dataset, write_dataset
from .verify import run_gradcheck_suite, suite_max_error, suite_ok


def _load_config(path: str | None) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _write_provenance(outdir: Path, cfg: RunConfig, inputs: dict[str, str]):
    """Canonical config plus content hashes of every input artifact."""
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.cfg").write_text(cfg.canonical_text(), encoding="utf-8")
    lines = []
    for name, p in sorted(inputs.items()):
        digest = fnv1a64(Path(p).read_bytes())
        lines.append(f"input {name} path={p} fnv1a64={digest:016x}\n")
    (outdir / "provenance.txt").write_text("".join(lines), encoding="utf-8")


def _source_path(data: Path, task: str) -> Path:
    return data / f"{task.lower()}-source.tsv"


def _target_path(data: Path, task: str) -> Path:
    return data / f"{task.lower()}-target.tsv"


def _read_corpora(data: Path, role: str) -> dict[str, list]:
    path_of = _source_path if role == "source" else _target_path
    return {t: read_dataset(path_of(data, t)) for t in TASK_TYPES}


def _load_meta_dir(meta_dir: Path):
    meta = load_meta(meta_dir / "meta.prompt")
    factors = {t: load_factors(meta_dir / f"factors-{t.lower()}.prompt") for t in TASK_TYPES}
    return meta, factors


# -----------------------------------------------------------------------
# Subcommands
# -----------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = _load_config(args.config)
    world = generate_world(cfg.world_spec())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, t in enumerate(TASK_TYPES):
        src = generate_task_corpus(world, t, cfg.n_source_records, "source",
                                   cfg.world_seed * 1000 + i)
        tgt = generate_task_corpus(world, t, cfg.n_target_records, "target",
                                   cfg.world_seed * 1000 + 500 + i)
        write_dataset(_source_path(out, t), src)
        write_dataset(_target_path(out, t), tgt)
        print(f"{t}: {len(src)} source records, {len(tgt)} target records")
    stream_path = out / "pretrain.txt"
    stream_path.write_text("\n".join(world.pretrain_stream) + "\n", encoding="utf-8")
    print(f"pretraining stream: {len(world.pretrain_stream)} lines")
    _write_provenance(out, cfg, {"config": args.config} if args.config else {})


def cmd_pretrain(args):
    cfg = _load_config(args.config)
    world = generate_world(cfg.world_spec())
    lines = [ln for ln in Path(args.data, "pretrain.txt").read_text(encoding="utf-8").splitlines()
             if ln.strip()]
    corpus = [world.tokenizer.encode(ln) for ln in lines]
    ckpt = pretrain_backbone(corpus, cfg.backbone_config(), cfg.pretrain_seed,
                             tokenizer=world.tokenizer, epochs=cfg.pretrain_epochs,
                             lr=cfg.pretrain_lr, batch_size=cfg.pretrain_batch,
                             prefix_max=cfg.pretrain_prefix_max)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(args.out)
    print(f"frozen backbone: {ckpt.n_parameters()} parameters, "
          f"hash {ckpt.content_hash:016x} -> {args.out}")


def cmd_train_teachers(args):
    cfg = _load_config(args.config)
    ckpt = BackboneCheckpoint.load(args.ckpt)
    dconf = cfg.distill_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = Path(args.data)
    for i, t in enumerate(TASK_TYPES):
        corpus = read_dataset(_source_path(data, t))
        teacher, rows = train_teacher(ckpt, corpus, dconf, seed=cfg.stage_seed * 100 + i)
        save_teacher(out / f"teacher-{t.lower()}.prompt", teacher)
        write_loss_csv(out / f"stage1-{t.lower()}.csv", rows)
        means = epoch_means(rows)
        first, last = min(means), max(means)
        print(f"teacher {t}: first-epoch mean loss {means[first]:.4f}, "
              f"last {means[last]:.4f}")
    _write_provenance(out, cfg, {"ckpt": args.ckpt})


def cmd_distill(args):
    cfg = _load_config(args.config)
    ckpt = BackboneCheckpoint.load(args.ckpt)
    teachers_dir = Path(args.teachers)
    teachers = {t: load_teacher(teachers_dir / f"teacher-{t.lower()}.prompt")
                for t in TASK_TYPES}
    corpora = _read_corpora(Path(args.data), "source")
    meta, factors, rows = train_shared_prompt(ckpt, teachers, corpora, cfg.distill_config())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_meta(out / "meta.prompt", meta)
    for t in TASK_TYPES:
        save_factors(out / f"factors-{t.lower()}.prompt", factors[t])
    write_loss_csv(out / "stage2.csv", rows)
    print(f"shared prompt distilled over {rows[-1].step} steps -> {out}")
    _write_provenance(out, cfg, {"ckpt": args.ckpt})


def cmd_adapt(args):
    cfg = _load_config(args.config)
    ckpt = BackboneCheckpoint.load(args.ckpt)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    task = args.task.upper()
    if task not in TASK_TYPES:
        raise ContractError(f"unknown task {args.task!r}; choose from {TASK_TYPES}")
    corpus = read_dataset(_target_path(Path(args.data), task))
    aconf = cfg.adapt_config()
    method = args.method
    if method == "mpt":
        if not args.meta:
            raise ContractError("adapt --method mpt requires --meta")
        meta, factors = _load_meta_dir(Path(args.meta))
        trained, info = adapter_mod.adapt_full(ckpt, meta, factors[task], corpus, aconf)
        save_adapter(args.out, trained)
        if args.compress:
            save_compressed(str(args.out) + ".compressed", task,
                            compress_adapter(meta.P_star, trained))
    elif method == "pt":
        prompt, info = baselines_mod.baseline_pt(ckpt, corpus, aconf, seed=cfg.stage_seed)
        baselines_mod.save_pt_prompt(args.out, prompt, corpus[0].dataset_id)
    elif method == "lora":
        la, info = baselines_mod.baseline_lora(ckpt, corpus, cfg.lora_rank, aconf,
                                               seed=cfg.stage_seed)
        la.save(args.out)
    elif method == "fullft":
        tuned, info = baselines_mod.baseline_fullft(ckpt, corpus, aconf, seed=cfg.stage_seed)
        tuned.save(args.out)
    else:
        raise ContractError(f"unknown method {method!r}")
    pct = info.get("params_pct", baselines_mod.percent_trainable(info["n_trainable"], ckpt))
    print(f"{method} on {task}: best epoch {info['best_epoch']}, "
          f"val loss {info['best_val_loss']:.4f}, trainable {info['n_trainable']} "
          f"({pct:.2f}%) -> {args.out}")


def cmd_fewshot(args):
    cfg = _load_config(args.config)
    ckpt = BackboneCheckpoint.load(args.ckpt)
    meta, factors = _load_meta_dir(Path(args.meta))
    corpora = _read_corpora(Path(args.data), "target")
    methods = (args.methods or cfg.methods).split(",")
    rows, results = adapter_mod.run_fewshot_sweep(
        ckpt, meta, factors, corpora, methods, cfg.adapt_config(),
        lora_rank=cfg.lora_rank, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    adapter_mod.write_sweep_csv(out / "sweep.csv", rows)
    adapter_mod.write_sweep_agg_csv(out / "sweep-agg.csv", results)
    from .figures import fewshot_figure
    fewshot_figure(results, out / "fewshot.png")
    print(f"{len(rows)} sweep cells -> {out}/sweep.csv, sweep-agg.csv, fewshot.png")
    _write_provenance(out, cfg, {"ckpt": args.ckpt})


def _load_artifact(path: Path, ckpt: BackboneCheckpoint):
    """Sniff an artifact file; returns (kind, prompt, lora, eval_ckpt)."""
    with open(path, "rb") as fh:
        magic = fh.read(5)
    if magic == b"MPTC1":
        kv, tensors = read_container(path)
        kind = kv.get("kind", "")
        if kind == "lora":
            return "lora", None, baselines_mod.LoraAdapter.load(path, ckpt.config), ckpt
        if kind == "pt":
            return "pt", tensors["prompt"], None, ckpt
        if "vocab_size" in kv:
            return "fullft", None, None, BackboneCheckpoint.load(path)
        raise ContractError(f"{path}: unrecognized container kind {kind!r}")
    from .promptkit import read_prompt_file
    meta, tensors = read_prompt_file(path)
    kind = meta["kind"]
    if kind == "teacher":
        return "teacher", tensors[0], None, ckpt
    if kind == "meta":
        return "meta", tensors[0], None, ckpt
    if kind == "compressed":
        return "compressed", load_compressed(path)[1], None, ckpt
    raise ContractError(
        f"{path}: adapter files need the shared prompt; pass --meta to compose")


def cmd_eval(args):
    cfg = _load_config(args.config)
    ckpt = BackboneCheckpoint.load(args.ckpt)
    path = Path(args.artifact)
    if args.meta:
        trained = load_adapter(path)
        meta, _ = _load_meta_dir(Path(args.meta))
        kind, prompt, lora, eval_ckpt = "mpt", compose_target_prompt(meta.P_star, trained), None, ckpt
    else:
        kind, prompt, lora, eval_ckpt = _load_artifact(path, ckpt)
    records = [r for r in read_dataset(args.data) if r.split == args.split]
    if not records:
        raise ContractError(f"{args.data}: no records in split {args.split!r}")
    outcome = evaluate_records(eval_ckpt, prompt, records, max_new=cfg.eval_max_new,
                               lora=lora, method=args.method or kind,
                               params_pct=args.params_pct)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_outcomes_jsonl(args.out, [outcome])
    print(f"{outcome.method} on {outcome.task} [{args.split}]: "
          f"{outcome.metric_name}={outcome.value:.4f} "
          f"(malformed {outcome.malformed_output_count}/{outcome.n_examples}) -> {args.out}")


_METHOD_ORDER = {"fullft": 0, "lora": 1, "pt": 2, "mpt": 3}


def cmd_report(args):
    runs = Path(args.runs)
    outcomes: list[EvalOutcome] = []
    for p in sorted(runs.glob("*.jsonl")):
        outcomes.extend(read_outcomes_jsonl(p))
    if not outcomes:
        raise ContractError(f"{runs}: no evaluation outcome files (*.jsonl)")
    by_method: dict[str, dict[str, float]] = {}
    pct: dict[str, float | None] = {}
    for o in outcomes:
        cells = by_method.setdefault(o.method, {})
        if o.task_type in cells:
            raise ContractError(f"duplicate cell for method {o.method!r}, task {o.task_type}")
        cells[o.task_type] = o.value
        if o.params_pct is not None:
            pct[o.method] = o.params_pct
    task_names = [t for t in TASK_TYPES if any(t in v for v in by_method.values())]
    methods = sorted(by_method, key=lambda m: (_METHOD_ORDER.get(m, 99), m))
    rows = [ReportRow(m, pct.get(m), by_method[m]) for m in methods]
    report = aggregate_report(task_names, rows)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_report_tsv(args.out, report)
    from .figures import report_figure
    report_figure(report, Path(args.out).with_suffix(".png"))
    print(f"report over {len(methods)} methods x {len(task_names)} tasks -> {args.out}")


def cmd_param_count(args):
    print(param_count(args.L, args.d, args.tau, args.mode))


def cmd_gradcheck(args):
    reports = run_gradcheck_suite(seed=args.seed)
    for name, rep in reports:
        state = "ok" if rep.ok else f"FAIL ({len(rep.failures)} elements)"
        print(f"{name:24s} max_rel_error={rep.max_rel_error:.3e} "
              f"checked={rep.n_checked:4d} {state}")
    if not suite_ok(reports):
        raise NumericError(f"gradient verification failed; max relative error "
                           f"{suite_max_error(reports):.3e}")
    print(f"all checks passed; max relative error {suite_max_error(reports):.3e}")


# -----------------------------------------------------------------------
# Parser
# -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="promptdistill",
        description="Multitask soft-prompt distillation with rank-1 target adaptation "
                    "on a tiny frozen transformer.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="generate the synthetic world and all corpora")
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="pretrain and freeze the backbone")
    sp.add_argument("--config", default=None)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train-teachers", help="train the five teacher prompts")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_teachers)

    sp = sub.add_parser("distill", help="joint distillation of the shared prompt")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--teachers", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("adapt", help="full-data adaptation on one target task")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--meta", default=None)
    sp.add_argument("--task", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--method", default="mpt", choices=["mpt", "pt", "lora", "fullft"])
    sp.add_argument("--compress", action="store_true",
                    help="also write the composed L x d prompt matrix")
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("fewshot", help="few-shot sweep over methods, tasks, k, draws")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--meta", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", default=None)
    sp.add_argument("--methods", default=None, help="comma list: mpt,pt,lora")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fewshot)

    sp = sub.add_parser("eval", help="evaluate an artifact on a dataset split")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--artifact", required=True)
    sp.add_argument("--meta", default=None, help="shared-prompt dir (adapter artifacts)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--config", default=None)
    sp.add_argument("--method", default=None, help="method label stamped into the output")
    sp.add_argument("--params-pct", type=float, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="aggregate eval outcomes into the score table")
    sp.add_argument("--runs", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("param-count", help="tunable-parameter formulas")
    sp.add_argument("--L", type=int, required=True)
    sp.add_argument("--d", type=int, required=True)
    sp.add_argument("--tau", type=int, default=1)
    sp.add_argument("--mode", required=True,
                    choices=["adaptation", "per_task_total", "group_total"])
    sp.set_defaults(func=cmd_param_count)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

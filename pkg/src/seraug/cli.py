"""Command-line pipeline: gen-text, gen-speech, train, sweep, eval.

Every subcommand is deterministic in mock mode given (config, seed). Run
directories are append-only: existing artifacts are never overwritten unless
--force is passed. Exit codes: 0 success, 2 configuration error, 3 transport
error, 4 data validation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import corpus, metrics, promptgen, strategies, synthesis
from .config import RunConfig, freeze_config, load_config
from .errors import ConfigError, DataError, TransportError
from .model_core import save_checkpoint, load_checkpoint
from .utils import append_jsonl, read_jsonl, write_jsonl


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return 2
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seraug",
        description="Synthetic-speech augmentation toolkit for speech emotion recognition",
    )
    sub = parser.add_subparsers(dest="command")

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--mock", action="store_true", help="force offline mock clients")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers")
        p.add_argument("--out", default=None, help="run directory")
        p.add_argument("--force", action="store_true", help="allow overwriting artifacts")

    p = sub.add_parser("gen-text", help="generate emotional text from prompt tuples")
    common(p)
    p.set_defaults(func=cmd_gen_text)

    p = sub.add_parser("gen-speech", help="synthesize speech for generated texts")
    common(p)
    p.add_argument("--texts", default=None, help="texts.jsonl from gen-text")
    p.set_defaults(func=cmd_gen_speech)

    p = sub.add_parser("train", help="train one strategy over all folds")
    common(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run the strategy across synthetic ratios")
    common(p)
    _train_flags(p)
    p.add_argument("--ratios", default="0,0.25,0.5,1.0", help="comma-separated ratios")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one fold's test set")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default=None, help="manifest override")
    p.add_argument("--fold", type=int, required=True, help="fold index (test session)")
    p.set_defaults(func=cmd_eval)

    return parser


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=strategies.STRATEGIES, default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--repr", dest="repr_mode", choices=strategies.REPR_MODES, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--blob", action="store_true", help="generate the blob corpus first")


def cmd_gen_text(args) -> None:
    cfg = _resolve_config(args)
    run_dir = Path(args.out or "runs/gen-text")
    prompts_path = _fresh_path(run_dir / "prompts.jsonl", args.force)
    texts_path = _fresh_path(run_dir / "texts.jsonl", args.force)
    rejects_path = _fresh_path(run_dir / "rejects.jsonl", args.force)
    freeze_config(cfg, run_dir)

    client = cfg.chat.client(cfg.seed)
    tuples = promptgen.group_tuples(cfg.generation)

    prompt_rows = []
    text_rows = []
    reject_rows = []
    seen: set[str] = set()
    counts: dict[str, int] = {}
    for tup in tuples:
        system, user = promptgen.render_prompt(tup, cfg.generation.length_labels)
        prompt_rows.append({"tuple": tup.as_dict(), "system": system, "user": user})
        request = synthesis.ChatRequest(
            system=system,
            user=user,
            n_samples=cfg.generation.samples_per_tuple,
            temperature=cfg.chat.temperature,
            model_name=cfg.chat.model_name,
        )
        accepted_in_tuple = 0
        for raw in synthesis.chat_sample(request, client):
            result = promptgen.clean_text(raw, tup, seen)
            if result.accepted:
                text_id = f"{promptgen.tuple_slug(tup)}-{accepted_in_tuple:02d}"
                accepted_in_tuple += 1
                text_rows.append({"id": text_id, "tuple": tup.as_dict(), "text": result.cleaned})
                counts["accepted"] = counts.get("accepted", 0) + 1
            else:
                reject_rows.append(
                    {"tuple": tup.as_dict(), "raw": raw, "reason": result.rejected_reason}
                )
                counts[result.rejected_reason] = counts.get(result.rejected_reason, 0) + 1

    write_jsonl(prompts_path, prompt_rows)
    write_jsonl(texts_path, text_rows)
    write_jsonl(rejects_path, reject_rows)

    rejected = {k: v for k, v in counts.items() if k != "accepted"}
    print(f"prompts: {len(prompt_rows)}")
    print(f"accepted: {counts.get('accepted', 0)}")
    for reason in sorted(rejected):
        print(f"rejected[{reason}]: {rejected[reason]}")


def cmd_gen_speech(args) -> None:
    cfg = _resolve_config(args)
    run_dir = Path(args.out or "runs/gen-speech")
    freeze_config(cfg, run_dir)
    texts_path = Path(args.texts or run_dir / "texts.jsonl")
    if not texts_path.exists():
        raise ConfigError(f"texts file not found: {texts_path}")

    texts = [
        promptgen.AcceptedText(
            id=row["id"],
            tuple=promptgen.GenerationTuple(**row["tuple"]),
            text=row["text"],
        )
        for row in read_jsonl(texts_path)
    ]
    jobs = synthesis.plan_jobs(
        texts, cfg.tts.voices, cfg.generation.emotions, out_dir=run_dir / "audio"
    )

    manifest_path = run_dir / "synthesis.jsonl"
    done = set()
    if manifest_path.exists():
        done = {row["id"] for row in read_jsonl(manifest_path)}
    client = cfg.tts.client(cfg.seed)
    rows = synthesis.run_jobs(jobs, client, skip_ids=done)
    for row in rows:
        # manifest paths are relative to the manifest's directory
        row["output_path"] = str(Path(row["output_path"]).relative_to(run_dir))
        append_jsonl(manifest_path, row)
    print(f"jobs planned: {len(jobs)}, skipped: {len(jobs) - len(rows)}, synthesized: {len(rows)}")


def cmd_train(args) -> None:
    cfg = _resolve_config(args)
    run_dir = Path(args.out or "runs/train")
    results_path = _fresh_path(run_dir / "results.csv", args.force)
    freeze_config(cfg, run_dir)

    records, base_dir = _load_corpus(cfg, args, run_dir)
    outputs = _run_folds(records, base_dir, cfg.train, args.jobs)

    fold_results = []
    for trained in outputs:
        fold_dir = run_dir / f"fold{trained.result.fold_index}"
        write_jsonl(fold_dir / "logs.jsonl", (log.as_row() for log in trained.logs))
        save_checkpoint(
            fold_dir / "model.ckpt",
            trained.model,
            trained.head,
            meta={
                "strategy": cfg.train.strategy,
                "repr_mode": cfg.train.repr_mode,
                "epoch": trained.selected_epoch,
                "seed": cfg.train.seed,
            },
        )
        _write_confusion(fold_dir / "confusion.json", trained.result)
        fold_results.append(trained.result)

    ratio = 0.0 if cfg.train.strategy == "baseline" else cfg.train.ratio
    csv_text = metrics.results_csv([(ratio, fold_results)])
    results_path.write_text(csv_text, encoding="utf-8")

    mean_wa, mean_ua = metrics.aggregate_folds(fold_results, expected_folds=len(fold_results))
    for r in fold_results:
        print(f"fold {r.fold_index}: WA={r.wa:.4f} UA={r.ua:.4f}")
    print(f"mean: WA={mean_wa:.4f} UA={mean_ua:.4f}")


def cmd_sweep(args) -> None:
    cfg = _resolve_config(args)
    run_dir = Path(args.out or "runs/sweep")
    sweep_path = _fresh_path(run_dir / "sweep.csv", args.force)
    freeze_config(cfg, run_dir)

    try:
        ratios = [float(r) for r in str(args.ratios).split(",") if r.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad --ratios value: {exc}") from exc
    if not ratios:
        raise ConfigError("no ratios given")
    if any(r < 0 for r in ratios) or ratios != sorted(ratios):
        raise ConfigError("ratios must be >= 0 and sorted ascending")
    if cfg.train.strategy == "baseline" and any(r > 0 for r in ratios):
        raise ConfigError("sweeping ratios needs an augmentation strategy, not baseline")

    records, base_dir = _load_corpus(cfg, args, run_dir)

    def run_at_ratio(ratio: float) -> list[metrics.FoldResult]:
        plan = strategies.plan_for_ratio(cfg.train, ratio)
        outputs = _run_folds(records, base_dir, plan, args.jobs)
        return [t.result for t in outputs]

    _, csv_text = metrics.ratio_sweep(ratios, run_at_ratio)
    sweep_path.write_text(csv_text, encoding="utf-8")
    print(csv_text, end="")


def cmd_eval(args) -> None:
    cfg = _resolve_config(args)
    run_dir = Path(args.out or "runs/eval")
    manifest = args.manifest or cfg.corpus.manifest
    if manifest is None:
        raise ConfigError("eval needs --manifest or corpus.manifest in the config")
    records = corpus.load_manifest(manifest)
    model, _, header = load_checkpoint(args.checkpoint)

    folds = corpus.make_folds(records, cfg.train.seed)
    split = next((f for f in folds if f.fold_index == args.fold), None)
    if split is None:
        raise ConfigError(f"fold {args.fold} not in 1..5")
    by_id = {r.id: r for r in records}
    items = corpus.load_items([by_id[i] for i in split.test_ids], Path(manifest).parent)
    result = metrics.fold_result(split.fold_index, strategies.evaluate(model, items))

    run_dir.mkdir(parents=True, exist_ok=True)
    _write_confusion(run_dir / f"confusion_fold{args.fold}.json", result)
    print(
        f"fold {result.fold_index} ({header.get('strategy', '?')}): "
        f"WA={result.wa:.4f} UA={result.ua:.4f}"
    )


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if args.mock:
        cfg.chat.mock_mode = True
        cfg.tts.mock_mode = True
    for attr in ("strategy", "ratio", "repr_mode", "epochs", "batch_size"):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg.train, attr, value)
    return cfg


def _load_corpus(cfg: RunConfig, args, run_dir: Path):
    if getattr(args, "blob", False):
        blob = cfg.corpus.blob
        data_dir = run_dir / "data"
        manifest = data_dir / "manifest.jsonl"
        if manifest.exists() and not args.force:
            records = corpus.load_manifest(manifest)
        else:
            records = corpus.generate_blob_corpus(
                data_dir,
                n_per_class=blob.n_per_class,
                n_synthetic=blob.n_synthetic,
                dims=blob.dims,
                t_range=tuple(blob.t_range),
                class_separation=blob.class_separation,
                noise_std=blob.noise_std,
                domain_shift=blob.domain_shift,
                n_layers=blob.n_layers,
                seed=cfg.seed,
            )
        return records, data_dir
    if cfg.corpus.manifest is None:
        raise ConfigError("no corpus: set corpus.manifest in the config or pass --blob")
    manifest = Path(cfg.corpus.manifest)
    records = corpus.load_manifest(manifest)
    if not corpus.check_real_corpus_total(records):
        n_real = sum(1 for r in records if r.domain == "real")
        print(
            f"note: manifest has {n_real} real utterances "
            f"(canonical corpus total is {corpus.REAL_CORPUS_CHECKSUM})"
        )
    return records, manifest.parent


def _run_folds(records, base_dir, plan: strategies.TrainPlan, jobs: int):
    if jobs <= 1:
        return strategies.run_plan(records, base_dir, plan)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [
            pool.submit(strategies.run_plan, records, base_dir, plan, [k])
            for k in corpus.SESSIONS
        ]
        outputs = [f.result()[0] for f in futures]
    return outputs


def _write_confusion(path: Path, result: metrics.FoldResult) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "fold": result.fold_index,
        "wa": result.wa,
        "ua": result.ua,
        "labels": list(corpus.CLASSES),
        "matrix": result.confusion.tolist(),
    }
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _fresh_path(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise ConfigError(f"artifact already exists (rerun with --force): {path}")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


if __name__ == "__main__":
    sys.exit(main())

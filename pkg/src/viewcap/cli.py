"""Command-line interface: corpus generation, training, captioning, evaluation.

Subcommands: ``gen-data``, ``train``, ``caption``, ``eval``, ``ablate``,
``inspect-schedule``.  Every command reads settings from defaults, then an
optional ``--config`` file, then repeatable ``--set key=value`` overrides,
then dedicated flags (``--seed``, ``--out``, ...), in that order.

Exit codes: 0 success; 1 missing input files or output directories;
2 invalid arguments or configuration; 3 numerical fault during training or
sampling (the message names the failing step).

Artifacts are written atomically (complete or absent, never partial) and
embed the run's config hash and seed for provenance.  Wall-clock timings in
caption records live under a separate ``timings`` key so the rest of each
record is deterministic for a fixed seed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import sys
from pathlib import Path

from .checkpoint import Checkpoint, load_checkpoint
from .config import RunConfig
from .decoding import caption_shape
from .diffusion import SamplingFault, TrainingFault, train
from .metrics import MetricsReport, compute_metrics_report
from .patchgrid import ViewPatchGrid
from .schedule import SCHEDULE_KINDS, NoiseSchedule, build_schedule, posterior_coeffs, respace
from .synthdata import (
    CaptionGrammar,
    ShapeRecord,
    default_space,
    drop_patches,
    generate_corpus,
    load_corpus,
    mix_patches,
    standard_view_spec,
    training_pairs,
    write_corpus,
)
from .tensorio import write_file_atomic

__all__ = ["main", "build_parser"]

ABLATE_AXES = ("v", "h", "s", "schedule", "pooling")


# ---------------------------------------------------------------------------
# Argument parsing and config resolution


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viewcap",
        description="Multi-view shape captioning with partial-noising diffusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--out", default=None, help="output directory (must exist)")

    p = sub.add_parser("gen-data", help="generate a synthetic shape corpus")
    add_common(p)

    p = sub.add_parser("train", help="train a denoiser on a corpus")
    add_common(p)
    p.add_argument("--dataset", default=None, help="corpus JSONL path")
    p.add_argument("--resume", default=None, help="checkpoint manifest to resume from")
    p.add_argument("--log-every", type=int, default=0, help="print progress every N steps")

    p = sub.add_parser("caption", help="caption shapes with a trained model")
    add_common(p)
    p.add_argument("--dataset", default=None, help="corpus JSONL path")
    p.add_argument("--checkpoint", default=None, help="checkpoint manifest path")
    p.add_argument("--shape-id", default=None, help="caption one shape by id")
    p.add_argument("--split", default=None, help="caption a split (default: test)")
    p.add_argument("--drop-part", default=None, metavar="KIND", help="occlude a part kind in every view")
    p.add_argument("--mix-with", default=None, metavar="SHAPE_ID", help="import a part from another shape")
    p.add_argument("--mix-part", default="leg", metavar="KIND", help="part kind to import (default: leg)")

    p = sub.add_parser("eval", help="score generated captions against references")
    add_common(p)
    p.add_argument("--dataset", default=None, help="corpus JSONL path")
    p.add_argument("--checkpoint", default=None, help="checkpoint manifest path")
    p.add_argument("--split", default=None, help="split to score (default: test)")
    p.add_argument(
        "--oracle",
        action="store_true",
        help="score the first reference against the references (metrics sanity path)",
    )

    p = sub.add_parser("ablate", help="sweep one axis and report metrics per value")
    add_common(p)
    p.add_argument("--dataset", default=None, help="corpus JSONL path")
    p.add_argument("--checkpoint", default=None, help="checkpoint manifest path")
    p.add_argument("--axis", required=True, choices=ABLATE_AXES, help="axis to sweep")
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--split", default=None, help="split to score (default: test)")

    p = sub.add_parser("inspect-schedule", help="dump a noise schedule as CSV")
    add_common(p)

    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig() if args.config is None else RunConfig.from_file(args.config)
    overrides = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if overrides:
        cfg = cfg.with_overrides(overrides)
    direct = {}
    for name in ("seed", "out", "dataset", "checkpoint"):
        value = getattr(args, name, None)
        if value is not None:
            direct[name] = value
    if getattr(args, "oracle", False):
        direct["oracle"] = True
    if direct:
        cfg = dataclasses.replace(cfg, **direct)
    return cfg


# ---------------------------------------------------------------------------
# Shared helpers


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise ValueError("an output directory is required (--out or the out key)")
    out = Path(cfg.out)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory {out} does not exist")
    return out


def _load_records(cfg: RunConfig, space) -> list[ShapeRecord]:
    if not cfg.dataset:
        raise ValueError("a dataset is required (--dataset or the dataset key)")
    return load_corpus(cfg.dataset, space)


def _load_model(cfg: RunConfig) -> Checkpoint:
    if not cfg.checkpoint:
        raise ValueError("a checkpoint is required (--checkpoint or the checkpoint key)")
    ck = load_checkpoint(cfg.checkpoint)
    if ck.vocab is None:
        raise ValueError(f"checkpoint {cfg.checkpoint} carries no vocabulary")
    if ck.train_config is None:
        raise ValueError(f"checkpoint {cfg.checkpoint} carries no train config")
    return ck


def _inference_schedule(ck: Checkpoint, k: int) -> NoiseSchedule:
    """The checkpoint's training schedule, respaced to k steps when k > 0."""
    kind = ck.train_config["schedule_kind"]
    T = int(ck.train_config["T"])
    schedule = build_schedule(kind, T)
    if k > 0:
        if k > T:
            raise ValueError(f"k={k} exceeds the checkpoint's schedule length T={T}")
        schedule = respace(schedule, k)
    return schedule


def _select_records(
    records: list[ShapeRecord], shape_id: str | None, split: str | None
) -> list[ShapeRecord]:
    if shape_id is not None:
        chosen = [r for r in records if r.shape.shape_id == shape_id]
        if not chosen:
            raise ValueError(f"no shape with id {shape_id!r} in the dataset")
        return chosen
    split = split or "test"
    if split not in ("train", "test", "all"):
        raise ValueError(f"split must be train, test, or all, got {split!r}")
    chosen = [r for r in records if split == "all" or r.split == split]
    if not chosen:
        raise ValueError(f"split {split!r} selects no shapes")
    return chosen


def _views_for(record: ShapeRecord, use_views: int) -> list[ViewPatchGrid]:
    if use_views > len(record.views):
        raise ValueError(
            f"use_views={use_views} but the dataset provides {len(record.views)} views"
        )
    count = use_views or len(record.views)
    return list(record.views[:count])


def _provenance_comment(cfg: RunConfig) -> str:
    return f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n"


def _json_line(payload: dict) -> str:
    return json.dumps(payload, ensure_ascii=False)


def _checkpoint_blob_hash(manifest_path) -> str:
    """Short digest of the parameter blob: identifies the model weights."""
    blob = Path(manifest_path).with_suffix(".bin")
    return hashlib.sha256(blob.read_bytes()).hexdigest()[:12]


def _caption_one(
    ck: Checkpoint,
    record: ShapeRecord,
    views: list[ViewPatchGrid],
    cfg: RunConfig,
    schedule: NoiseSchedule,
) -> dict:
    """Caption one shape and serialize the full decode record."""
    result = caption_shape(
        ck.model,
        views,
        cfg.s,
        schedule,
        method=cfg.pooling,
        seed=cfg.seed,
        clamp_enabled=cfg.clamp,
    )
    vocab = ck.vocab
    per_view = []
    for vd in result.per_view:
        per_view.append(
            {
                "view_index": vd.candidate_set.view_index,
                "candidates": [
                    " ".join(vocab.decode(c.token_list()))
                    for c in vd.candidate_set.candidates
                ],
                "risks": list(vd.risks),
                "selected_index": vd.selected_index,
            }
        )
    final_ids = [int(i) for i in result.final_tokens]
    return {
        "shape_id": record.shape.shape_id,
        "category": record.shape.category,
        "split": record.split,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "views_used": len(views),
        "s": cfg.s,
        "k": cfg.k,
        "pooling": cfg.pooling,
        "final_caption": " ".join(vocab.decode(final_ids)),
        "final_token_ids": final_ids,
        "references": [" ".join(c) for c in record.captions],
        "per_view": per_view,
        "timings": {
            "per_view_seconds": [vd.seconds for vd in result.per_view],
            "total_seconds": sum(vd.seconds for vd in result.per_view),
        },
    }


def _eval_report(
    ck: Checkpoint,
    records: list[ShapeRecord],
    cfg: RunConfig,
) -> MetricsReport:
    """Caption every record with the given settings and score the corpus."""
    schedule = _inference_schedule(ck, cfg.k)
    candidates = []
    reference_sets = []
    for record in records:
        views = _views_for(record, cfg.use_views)
        result = caption_shape(
            ck.model,
            views,
            cfg.s,
            schedule,
            method=cfg.pooling,
            seed=cfg.seed,
            clamp_enabled=cfg.clamp,
        )
        candidates.append(ck.vocab.decode([int(i) for i in result.final_tokens]))
        reference_sets.append([list(c) for c in record.captions])
    return compute_metrics_report(candidates, reference_sets)


def _write_per_example_csv(path, cfg: RunConfig, report: MetricsReport, shape_ids) -> None:
    buf = io.StringIO()
    buf.write(_provenance_comment(cfg))
    writer = csv.writer(buf)
    writer.writerow(("shape_id",) + MetricsReport.PER_EXAMPLE_COLUMNS)
    for shape_id, row in zip(shape_ids, report.per_example):
        writer.writerow([shape_id] + [row[col] for col in MetricsReport.PER_EXAMPLE_COLUMNS])
    write_file_atomic(path, buf.getvalue().encode("utf-8"))


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(cfg: RunConfig, args: argparse.Namespace) -> int:
    out = _out_dir(cfg)
    space = default_space()
    grammar = CaptionGrammar(space, cfg.l_cap)
    view_spec = standard_view_spec(space, cfg.v)
    records = generate_corpus(
        cfg.n_shapes, view_spec, grammar, cfg.seed, cfg.captions_per_shape
    )
    corpus_path = out / "corpus.jsonl"
    write_corpus(records, corpus_path)

    vocab = grammar.vocabulary()
    split_counts = {
        "train": sum(1 for r in records if r.split == "train"),
        "test": sum(1 for r in records if r.split == "test"),
    }
    manifest = {
        "command": "gen-data",
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "n_shapes": cfg.n_shapes,
        "v": cfg.v,
        "captions_per_shape": cfg.captions_per_shape,
        "l_cap": cfg.l_cap,
        "vocab_size": len(vocab),
        "vocab_hash": hashlib.sha256("\n".join(vocab.tokens).encode("utf-8")).hexdigest()[:12],
        "split_counts": split_counts,
    }
    write_file_atomic(
        out / "gen_manifest.json",
        (json.dumps(manifest, indent=2) + "\n").encode("utf-8"),
    )
    print(
        f"wrote {len(records)} shapes "
        f"({split_counts['train']} train / {split_counts['test']} test) "
        f"to {corpus_path}"
    )
    return 0


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    out = _out_dir(cfg)
    space = default_space()
    records = _load_records(cfg, space)
    vocab = CaptionGrammar(space, cfg.l_cap).vocabulary()
    split = None if cfg.train_split == "all" else cfg.train_split
    pairs = training_pairs(records, vocab, cfg.l_cap, split)
    if not pairs:
        raise ValueError(f"split {cfg.train_split!r} gives no training pairs")

    L_img = records[0].views[0].n_patches
    model_config = cfg.model_config(
        L_img=L_img, vocab_size=len(vocab), patch_feat_dim=space.patch_feat_dim
    )
    train_config = cfg.train_config()

    init_model = None
    start_step = 0
    if args.resume:
        ck = load_checkpoint(args.resume)
        if ck.step >= cfg.steps:
            raise ValueError(
                f"steps={cfg.steps} must exceed the resumed checkpoint's step {ck.step}"
            )
        init_model = ck.model
        start_step = ck.step

    checkpoint_path = out / "checkpoint.json"
    curve_tmp = out / "curve.csv.partial"
    try:
        train(
            pairs,
            model_config,
            train_config,
            checkpoint_path=checkpoint_path,
            curve_path=curve_tmp,
            vocab=vocab,
            feature_space=space,
            log_every=args.log_every,
            init_model=init_model,
            start_step=start_step,
            extra_meta={"config_hash": cfg.config_hash(), "seed": cfg.seed},
        )
        curve_text = curve_tmp.read_text(encoding="utf-8")
        write_file_atomic(
            out / "curve.csv",
            (_provenance_comment(cfg) + curve_text).encode("utf-8"),
        )
    finally:
        if curve_tmp.exists():
            curve_tmp.unlink()

    done = cfg.steps - start_step
    origin = f" (resumed from step {start_step})" if start_step else ""
    print(
        f"trained {done} steps{origin} on {len(pairs)} pairs -> {checkpoint_path}"
    )
    return 0


def cmd_caption(cfg: RunConfig, args: argparse.Namespace) -> int:
    out = _out_dir(cfg)
    ck = _load_model(cfg)
    space = ck.feature_space or default_space()
    records = _load_records(cfg, space)
    chosen = _select_records(records, args.shape_id, args.split)
    schedule = _inference_schedule(ck, cfg.k)

    if args.drop_part is not None:
        space.part_id(args.drop_part)  # unknown kinds are invalid arguments
    donor = None
    if args.mix_with is not None:
        space.part_id(args.mix_part)
        matches = [r for r in records if r.shape.shape_id == args.mix_with]
        if not matches:
            raise ValueError(f"no shape with id {args.mix_with!r} in the dataset")
        donor = matches[0]

    lines = []
    for record in chosen:
        views = _views_for(record, cfg.use_views)
        if args.drop_part is not None:
            views = [drop_patches(v, args.drop_part) for v in views]
        if donor is not None:
            if len(donor.views) < len(views):
                raise ValueError(
                    f"shape {args.mix_with!r} has {len(donor.views)} views; "
                    f"{len(views)} are needed"
                )
            views = [
                mix_patches(v, donor.views[i], args.mix_part)
                for i, v in enumerate(views)
            ]
        payload = _caption_one(ck, record, views, cfg, schedule)
        lines.append(_json_line(payload))
        print(f"{record.shape.shape_id}: {payload['final_caption']}")

    captions_path = out / "captions.jsonl"
    write_file_atomic(captions_path, ("\n".join(lines) + "\n").encode("utf-8"))
    print(f"captioned {len(chosen)} shapes -> {captions_path}")
    return 0


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    out = _out_dir(cfg)
    split = args.split or "test"

    if cfg.oracle:
        space = default_space()
        records = _load_records(cfg, space)
        chosen = _select_records(records, None, split)
        shape_ids = [r.shape.shape_id for r in chosen]
        candidates = [list(r.captions[0]) for r in chosen]
        reference_sets = [[list(c) for c in r.captions] for r in chosen]
        report = compute_metrics_report(candidates, reference_sets)
    else:
        ck = _load_model(cfg)
        space = ck.feature_space or default_space()
        records = _load_records(cfg, space)
        chosen = _select_records(records, None, split)
        shape_ids = [r.shape.shape_id for r in chosen]
        report = _eval_report(ck, chosen, cfg)

    summary = {
        "command": "eval",
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "split": split,
        "oracle": cfg.oracle,
        "s": cfg.s,
        "k": cfg.k,
        "use_views": cfg.use_views,
        "pooling": cfg.pooling,
    }
    body = report.to_json_dict()
    body.pop("per_example")
    summary.update(body)
    write_file_atomic(
        out / "eval_report.json", (json.dumps(summary, indent=2) + "\n").encode("utf-8")
    )
    _write_per_example_csv(out / "eval_per_example.csv", cfg, report, shape_ids)
    print(
        f"eval split={split} n={report.n_examples} "
        f"bleu_4={report.bleu_4:.4f} rouge_l={report.rouge_l:.4f} "
        f"cider={report.cider:.4f} -> {out / 'eval_report.json'}"
    )
    return 0


def _ablate_schedule_mode(values: list[str]) -> str:
    """Integer values sweep respaced step counts; names sweep schedule kinds."""
    def is_int(v: str) -> bool:
        try:
            int(v)
            return True
        except ValueError:
            return False

    if all(is_int(v) for v in values):
        return "respace"
    if any(is_int(v) for v in values):
        raise ValueError(
            "schedule values must be all step counts or all schedule kinds, "
            f"got {values}"
        )
    for v in values:
        if v not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {v!r}")
    return "kind"


def _retrain(cfg: RunConfig, checkpoint_path: Path) -> None:
    """Train a model under the (modified) config into the given checkpoint."""
    space = default_space()
    records = _load_records(cfg, space)
    vocab = CaptionGrammar(space, cfg.l_cap).vocabulary()
    split = None if cfg.train_split == "all" else cfg.train_split
    pairs = training_pairs(records, vocab, cfg.l_cap, split)
    if not pairs:
        raise ValueError(f"split {cfg.train_split!r} gives no training pairs")
    L_img = records[0].views[0].n_patches
    train(
        pairs,
        cfg.model_config(
            L_img=L_img, vocab_size=len(vocab), patch_feat_dim=space.patch_feat_dim
        ),
        cfg.train_config(),
        checkpoint_path=checkpoint_path,
        vocab=vocab,
        feature_space=space,
        extra_meta={"config_hash": cfg.config_hash(), "seed": cfg.seed},
    )


def cmd_ablate(cfg: RunConfig, args: argparse.Namespace) -> int:
    out = _out_dir(cfg)
    axis = args.axis
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ValueError("--values must list at least one value")

    split = args.split or "test"
    schedule_mode = _ablate_schedule_mode(values) if axis == "schedule" else None
    retrain_axis = axis == "h" or schedule_mode == "kind"

    rows = []
    for value in values:
        variant = cfg
        checkpoint_path = cfg.checkpoint
        if axis == "v":
            variant = dataclasses.replace(cfg, use_views=int(value))
        elif axis == "s":
            variant = dataclasses.replace(cfg, s=int(value))
        elif axis == "pooling":
            variant = dataclasses.replace(cfg, pooling=value)
        elif axis == "schedule" and schedule_mode == "respace":
            variant = dataclasses.replace(cfg, k=int(value))
        elif axis == "schedule":
            variant = dataclasses.replace(cfg, schedule=value)
        else:  # axis == "h"
            variant = dataclasses.replace(cfg, h=int(value))

        if retrain_axis:
            checkpoint_path = out / f"ablate_{axis}_{value}_checkpoint.json"
            _retrain(variant, checkpoint_path)
            variant = dataclasses.replace(variant, checkpoint=str(checkpoint_path))

        ck = _load_model(variant)
        space = ck.feature_space or default_space()
        records = _load_records(variant, space)
        chosen = _select_records(records, None, split)
        report = _eval_report(ck, chosen, variant)
        row = {
            "axis": axis,
            "value": value,
            "bleu_4": report.bleu_4,
            "rouge_l": report.rouge_l,
            "n_examples": report.n_examples,
            "checkpoint_hash": _checkpoint_blob_hash(checkpoint_path),
        }
        rows.append(row)
        print(
            f"{axis}={value}: bleu_4={report.bleu_4:.4f} "
            f"rouge_l={report.rouge_l:.4f} n={report.n_examples}"
        )

    buf = io.StringIO()
    buf.write(_provenance_comment(cfg))
    writer = csv.writer(buf)
    header = ["axis", "value", "bleu_4", "rouge_l", "n_examples", "checkpoint_hash"]
    writer.writerow(header)
    for row in rows:
        writer.writerow([row[k] for k in header])
    csv_path = out / f"ablate_{axis}.csv"
    write_file_atomic(csv_path, buf.getvalue().encode("utf-8"))
    print(f"swept {axis} over {len(rows)} values -> {csv_path}")
    return 0


def cmd_inspect_schedule(cfg: RunConfig, args: argparse.Namespace) -> int:
    out = _out_dir(cfg)
    schedule = build_schedule(cfg.schedule, cfg.t)
    if cfg.k:
        schedule = respace(schedule, cfg.k)

    buf = io.StringIO()
    buf.write(
        f"# config_hash={cfg.config_hash()} seed={cfg.seed} "
        f"kind={cfg.schedule} T={cfg.t} k={cfg.k}\n"
    )
    writer = csv.writer(buf)
    header = ["t", "beta", "alpha_bar", "c_xt", "c_x0", "var"]
    if schedule.is_respaced:
        header.append("timestep_map")
    writer.writerow(header)
    for t in range(1, schedule.T + 1):
        coeffs = posterior_coeffs(schedule, t)
        row = [
            t,
            repr(schedule.beta(t)),
            repr(schedule.alpha_bar(t)),
            repr(coeffs.c_xt),
            repr(coeffs.c_x0),
            repr(coeffs.var),
        ]
        if schedule.is_respaced:
            row.append(schedule.original_timestep(t))
        writer.writerow(row)
    csv_path = out / "schedule.csv"
    write_file_atomic(csv_path, buf.getvalue().encode("utf-8"))
    print(f"wrote {schedule.T} schedule rows -> {csv_path}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "caption": cmd_caption,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "inspect-schedule": cmd_inspect_schedule,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, int):
            return exc.code
        return 0 if exc.code is None else 2
    try:
        cfg = _resolve_config(args)
        return _COMMANDS[args.command](cfg, args)
    except (TrainingFault, SamplingFault) as exc:
        step = getattr(exc, "step", None)
        where = f" (training step {step})" if step is not None else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line orchestration of the end-to-end workflow.

Subcommands: prepare | train | probe | evaluate | gradcheck | synth. Every
run is driven by one JSON config file plus optional --override flags (flags
win). All artifacts live inside the configured workspace; concurrent
invocations on the same workspace are rejected via a lock file.

Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import dkt, evaluation, ingest, llmprobe, nncore, synth
from .config import ConfigError, EvalSection, RunConfig, load_config
from .records import (
    PredictionRecord,
    read_prediction_dump,
    read_trajectory,
    write_prediction_dump,
    write_trajectory,
)

MANIFEST_VERSION = 1


class WorkspaceLocked(RuntimeError):
    pass


class Workspace:
    """Path layout and manifest bookkeeping for one run directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    # layout ---------------------------------------------------------------
    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    @property
    def sequences_path(self) -> Path:
        return self.root / "sequences.txt"

    @property
    def vocab_path(self) -> Path:
        return self.root / "vocab.json"

    @property
    def split_path(self) -> Path:
        return self.root / "split.json"

    @property
    def stats_path(self) -> Path:
        return self.root / "stats.json"

    @property
    def checkpoint_path(self) -> Path:
        return self.root / "checkpoint.npz"

    @property
    def training_log_path(self) -> Path:
        return self.root / "training_log.json"

    @property
    def repr_quiz_path(self) -> Path:
        return self.root / "skill_repr_quiz.json"

    @property
    def oracle_path(self) -> Path:
        return self.root / "oracle.tsv"

    def dump_path(self, tag: str, kind: str = "predictions") -> Path:
        return self.root / "dumps" / f"{tag}.{kind}.csv"

    def trajectory_path(self, tag: str, user_id: str) -> Path:
        return self.root / "trajectories" / tag / f"{user_id}.csv"

    def report_path(self, name: str) -> Path:
        return self.root / "reports" / name

    # manifest ---------------------------------------------------------------
    def read_manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {"version": MANIFEST_VERSION, "stages": {}}
        with open(self.manifest_path, "r", encoding="utf-8") as fh:
            return json.load(fh)

    def update_manifest(self, stage: str, entry: dict) -> None:
        manifest = self.read_manifest()
        manifest["version"] = MANIFEST_VERSION
        manifest.setdefault("stages", {})[stage] = entry
        write_json(self.manifest_path, manifest)

    @contextlib.contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        lock_path = self.root / ".lock"
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise WorkspaceLocked(
                f"workspace {self.root} is locked by another invocation "
                f"(remove {lock_path} if that run crashed)"
            ) from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            with contextlib.suppress(FileNotFoundError):
                os.unlink(lock_path)


def write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_split_sequences(ws: Workspace) -> Dict[str, List[ingest.StudentSequence]]:
    sequences = {s.user_id: s for s in ingest.read_sequences(ws.sequences_path)}
    with open(ws.split_path, "r", encoding="utf-8") as fh:
        split_info = json.load(fh)
    out: Dict[str, List[ingest.StudentSequence]] = {}
    for part in ("train", "val", "test"):
        out[part] = [sequences[u] for u in split_info[part]]
    return out


def load_vocab(ws: Workspace) -> ingest.Vocab:
    with open(ws.vocab_path, "r", encoding="utf-8") as fh:
        return ingest.Vocab.from_json_dict(json.load(fh))


def representative_quizzes(
    train_seqs: Sequence[ingest.StudentSequence], k: int
) -> List[int]:
    """Most frequent training-split quiz index per skill; ties break toward
    the smaller quiz index. Skills unseen in training fall back to quiz 0."""
    counts: Dict[int, Dict[int, int]] = {}
    for seq in train_seqs:
        for skill, quiz, _ in seq.steps:
            counts.setdefault(skill, {}).setdefault(quiz, 0)
            counts[skill][quiz] += 1
    out: List[int] = []
    for skill in range(k):
        per_quiz = counts.get(skill)
        if not per_quiz:
            out.append(0)
            continue
        best = min(per_quiz, key=lambda q: (-per_quiz[q], q))
        out.append(best)
    return out


# ---------------------------------------------------------------------------
# stats table


STAT_ROWS = [
    ("# of records (interactions)", "n_records", "{:d}"),
    ("# of students", "n_students", "{:d}"),
    ("# of quizzes", "n_quizzes", "{:d}"),
    ("# of skills", "n_skills", "{:d}"),
    ("Avg. interactions per student", "avg_per_student", "{:.1f}"),
    ("Avg. interactions per quiz", "avg_per_quiz", "{:.1f}"),
    ("Avg. interactions per skill", "avg_per_skill", "{:.1f}"),
    ("Correct interactions (y=1)", "n_correct", "{:d}"),
    ("Incorrect interactions (y=0)", "n_incorrect", "{:d}"),
]


def print_stats_table(stats_by_column: Dict[str, Optional[ingest.DatasetStats]]) -> None:
    columns = [name for name, stats in stats_by_column.items() if stats is not None]
    header = f"{'Statistic':<34}" + "".join(f"{c:>14}" for c in columns)
    print(header)
    print("-" * len(header))
    for label, attr, fmt in STAT_ROWS:
        cells = [fmt.format(getattr(stats_by_column[name], attr)) for name in columns]
        print(f"{label:<34}" + "".join(f"{c:>14}" for c in cells))


def split_stats_payload(
    split: ingest.DatasetSplit, extra: Dict[str, Optional[ingest.DatasetStats]]
) -> Dict[str, Optional[dict]]:
    payload: Dict[str, Optional[dict]] = {}
    for name, stats in extra.items():
        payload[name] = stats.to_dict() if stats is not None else None
    for name, part in split.partitions().items():
        payload[name] = ingest.summarize(part).to_dict()
    return payload


# ---------------------------------------------------------------------------
# prepare


def write_prepared_workspace(
    ws: Workspace,
    cfg: RunConfig,
    indexed: List[ingest.StudentSequence],
    vocab: ingest.Vocab,
    split: ingest.DatasetSplit,
    stats_columns: Dict[str, Optional[ingest.DatasetStats]],
    rejects: Sequence[ingest.RejectedRow] = (),
    filter_report: Optional[ingest.FilterReport] = None,
    stage: str = "prepare",
) -> None:
    ingest.write_sequences(ws.sequences_path, indexed)
    write_json(ws.vocab_path, vocab.to_json_dict())
    write_json(
        ws.split_path,
        {
            "seed": split.seed,
            "ratios": list(split.ratios),
            "train": [s.user_id for s in split.train],
            "val": [s.user_id for s in split.val],
            "test": [s.user_id for s in split.test],
        },
    )
    write_json(ws.stats_path, split_stats_payload(split, stats_columns))
    if filter_report is not None:
        write_json(ws.root / "filter_report.json", filter_report.to_dict())
    ingest.write_rejects(ws.root / "rejects.csv", rejects)
    write_json(
        ws.repr_quiz_path,
        {"repr_quiz": representative_quizzes(split.train, vocab.k)},
    )
    ws.update_manifest(
        stage,
        {"config_hash": cfg.config_hash(), "vocab_hash": vocab.content_hash(), "seed": cfg.seed},
    )


def cmd_prepare(cfg: RunConfig) -> int:
    if cfg.data is None:
        raise ConfigError("prepare requires a config.data section")
    raw_path = Path(cfg.data.raw_path)
    if not raw_path.exists():
        raise ConfigError(f"input file not found: {raw_path}")

    ws = Workspace(cfg.workspace)
    with ws.lock():
        with open(raw_path, "r", encoding=cfg.data.encoding, newline="") as fh:
            parsed = ingest.parse_interactions(
                fh, columns=cfg.data.columns or None, delimiter=cfg.data.delimiter
            )
        raw_sequences, filter_report = ingest.filter_and_order(parsed.records)
        if not raw_sequences:
            raise ConfigError("no students survived preprocessing")
        names = ingest.collect_skill_names(parsed.records)
        vocab = ingest.build_vocab(raw_sequences, names)
        indexed = ingest.index_sequences(raw_sequences, vocab)
        split = ingest.split_students(indexed, cfg.ratios, cfg.seed)

        stats_columns = {
            "original": ingest.summarize_records(parsed.records),
            "preprocessed": ingest.summarize(indexed),
        }
        write_prepared_workspace(
            ws, cfg, indexed, vocab, split, stats_columns,
            rejects=parsed.rejects, filter_report=filter_report,
        )

        all_stats = dict(stats_columns)
        for name, part in split.partitions().items():
            all_stats[name] = ingest.summarize(part)
        print_stats_table(all_stats)
        print(
            f"\nparsed {len(parsed.records)} records "
            f"({len(parsed.rejects)} rejected, {parsed.duplicates_dropped} duplicates); "
            f"kept {filter_report.kept_records} records / {filter_report.kept_students} students "
            f"after filtering (missing skill: {filter_report.missing_skill}, "
            f"multi-skill: {filter_report.multi_skill}, "
            f"short: {filter_report.short_student_rows})"
        )
        print(f"workspace ready: {ws.root}")
    return 0


# ---------------------------------------------------------------------------
# synth


def cmd_synth(cfg: RunConfig) -> int:
    if cfg.synth is None:
        raise ConfigError("synth requires a config.synth section")
    ws = Workspace(cfg.workspace)
    with ws.lock():
        corpus = synth.generate(cfg.synth)
        vocab = ingest.Vocab(
            skill_ids=tuple(str(i) for i in range(cfg.synth.k)),
            quiz_ids=tuple(str(i) for i in range(cfg.synth.k)),
            skill_names=tuple(corpus.skill_names()),
        )
        split = ingest.split_students(corpus.sequences, cfg.ratios, cfg.seed)
        stats_columns = {"preprocessed": ingest.summarize(corpus.sequences)}
        write_prepared_workspace(
            ws, cfg, corpus.sequences, vocab, split, stats_columns, stage="synth",
        )
        synth.write_oracle_sidecar(ws.oracle_path, corpus)
        write_prediction_dump(
            ws.dump_path("oracle"), synth.oracle_records(corpus, split.test)
        )
        write_json(ws.root / "generative_spec.json", cfg.synth.to_dict())

        all_stats = dict(stats_columns)
        for name, part in split.partitions().items():
            all_stats[name] = ingest.summarize(part)
        print_stats_table(all_stats)
        print(
            f"\nsynthetic corpus: {cfg.synth.n_students} students, "
            f"oracle AUC (test, next-step positions): "
            f"{synth.oracle_auc(corpus, split.test):.4f}"
        )
        print(f"workspace ready: {ws.root}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(cfg: RunConfig) -> int:
    ws = Workspace(cfg.workspace)
    with ws.lock():
        parts = load_split_sequences(ws)
        vocab = load_vocab(ws)
        vocab_hash = vocab.content_hash()

        t0 = time.perf_counter()
        model, log = dkt.train(
            parts["train"], parts["val"], vocab.k, cfg.dkt, vocab_hash=vocab_hash
        )
        wall = time.perf_counter() - t0

        dkt.save_checkpoint(model, ws.checkpoint_path)
        write_json(
            ws.training_log_path,
            {
                "epochs": [
                    {
                        "epoch": e.epoch,
                        "train_loss": e.train_loss,
                        "val_loss": e.val_loss,
                        "seconds": e.seconds,
                    }
                    for e in log
                ],
                "best_val_loss": min(e.val_loss for e in log),
                "config": cfg.dkt.to_dict(),
            },
        )

        predictions, mastery = dkt.predict_records(model, parts["test"], tag="dkt")
        write_prediction_dump(ws.dump_path("dkt"), predictions)
        write_prediction_dump(ws.dump_path("dkt", "mastery"), mastery)

        by_user = {s.user_id: s for part in parts.values() for s in part}
        for user_id in cfg.evaluate.heatmap_students:
            seq = by_user.get(user_id)
            if seq is None:
                print(f"warning: heatmap student {user_id} not found; skipped")
                continue
            traj = dkt.mastery_trajectory(model, seq)
            path = ws.trajectory_path("dkt", user_id)
            path.parent.mkdir(parents=True, exist_ok=True)
            write_trajectory(path, traj)

        ws.update_manifest(
            "train",
            {"config_hash": cfg.config_hash(), "vocab_hash": vocab_hash, "seed": cfg.seed},
        )
        best = min(e.val_loss for e in log)
        print(
            f"trained {len(log)} epochs in {wall:.1f}s; best validation loss {best:.4f}; "
            f"test dump: {len(predictions)} predictions"
        )
    return 0


# ---------------------------------------------------------------------------
# probe


def cmd_probe(cfg: RunConfig, tag_override: Optional[str] = None) -> int:
    if cfg.probe is None:
        raise ConfigError("probe requires a config.probe section")
    ws = Workspace(cfg.workspace)
    with ws.lock():
        parts = load_split_sequences(ws)
        vocab = load_vocab(ws)
        tag = tag_override or cfg.probe.tag
        client = llmprobe.ProbeClient(cfg.probe.probe)

        with open(ws.repr_quiz_path, "r", encoding="utf-8") as fh:
            repr_quiz_idx = json.load(fh)["repr_quiz"]
        repr_quiz = [str(vocab.quiz_ids[q]) for q in repr_quiz_idx]

        all_records: List[PredictionRecord] = []
        all_errors: List[str] = []
        mastery_records: List[PredictionRecord] = []
        stability: List[dict] = []

        for seq in parts["test"]:
            steps = llmprobe.display_steps(seq.steps, vocab.skill_names, vocab.quiz_ids)
            records, errors = llmprobe.probe_sequence(client, seq.user_id, steps, tag)
            all_records.extend(records)
            all_errors.extend(errors)
            if cfg.probe.stability_check:
                report = llmprobe.double_run_deltas(client, seq.user_id, steps, tag)
                stability.append({"user_id": seq.user_id, **report.to_dict()})

        by_user = {s.user_id: s for part in parts.values() for s in part}
        for user_id in cfg.probe.mastery_students:
            seq = by_user.get(user_id)
            if seq is None:
                print(f"warning: mastery student {user_id} not found; skipped")
                continue
            steps = llmprobe.display_steps(seq.steps, vocab.skill_names, vocab.quiz_ids)
            traj = llmprobe.probe_mastery(
                client, seq.user_id, steps, vocab.skill_names, repr_quiz
            )
            traj.steps = list(seq.steps)  # restore real quiz indices
            path = ws.trajectory_path(tag, user_id)
            path.parent.mkdir(parents=True, exist_ok=True)
            write_trajectory(path, traj)
            for rec in traj.practiced_path():
                mastery_records.append(
                    PredictionRecord(
                        user_id=rec.user_id, step=rec.step, skill=rec.skill,
                        y_true=rec.y_true, p=rec.p, model_tag=tag,
                    )
                )

        write_prediction_dump(ws.dump_path(tag), all_records)
        if mastery_records:
            write_prediction_dump(ws.dump_path(tag, "mastery"), mastery_records)

        coverage = evaluation.coverage(all_records)
        payload = {
            "tag": tag,
            "model": cfg.probe.probe.model,
            "coverage": coverage.to_dict(),
            "errors": all_errors,
            "network_requests": client.request_count,
        }
        if stability:
            payload["stability"] = stability
        write_json(ws.root / f"probe_report_{tag}.json", payload)

        audit_path = ws.root / "probe_audit" / f"{tag}.jsonl"
        audit_path.parent.mkdir(parents=True, exist_ok=True)
        with open(audit_path, "w", encoding="utf-8", newline="\n") as fh:
            for entry in sorted(client.audit, key=lambda e: (e["key"], e["cached"])):
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

        ws.update_manifest(
            f"probe:{tag}",
            {
                "config_hash": cfg.config_hash(),
                "vocab_hash": vocab.content_hash(),
                "seed": cfg.seed,
            },
        )
        print(
            f"probed {len(parts['test'])} students -> {len(all_records)} records "
            f"({coverage.unresolved} unresolved), {client.request_count} network requests"
        )
        if stability:
            worst = max(s["max_delta"] for s in stability)
            print(f"double-run stability: max probability delta {worst}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def evaluate_tag(
    ws: Workspace, tag: str, section: EvalSection
) -> Optional[dict]:
    pred_path = ws.dump_path(tag)
    if not pred_path.exists():
        return None
    records = read_prediction_dump(pred_path)
    result: dict = {"tag": tag, "coverage": evaluation.coverage(records).to_dict()}

    try:
        analysis = evaluation.roc_auc(records)
    except ValueError as exc:
        result["auc_error"] = str(exc)
        return result
    result["auc"] = analysis.auc
    result["youden"] = {"threshold": analysis.youden_threshold, "j": analysis.j_stat}
    result["confusion"] = evaluation.confusion_metrics(records, section.threshold).to_dict()

    roc_path = ws.report_path(f"roc_{tag}.csv")
    roc_path.parent.mkdir(parents=True, exist_ok=True)
    with open(roc_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fpr,tpr,threshold\n")
        for fpr, tpr, threshold in analysis.roc:
            fh.write(f"{fpr!r},{tpr!r},{threshold!r}\n")

    stage_table = evaluation.stage_errors(
        records, analysis.youden_threshold, macro=section.stage_macro
    )
    result["stage_errors"] = [row.to_dict() for row in stage_table]

    mastery_path = ws.dump_path(tag, "mastery")
    if mastery_path.exists():
        mastery = read_prediction_dump(mastery_path)
        try:
            result["coherence"] = evaluation.coherence_report(mastery).to_dict()
        except ValueError as exc:
            result["coherence_error"] = str(exc)

    heatmaps = {}
    vocab = None
    for user_id in section.heatmap_students:
        traj_path = ws.trajectory_path(tag, user_id)
        if not traj_path.exists():
            continue
        traj = read_trajectory(traj_path)
        if vocab is None:
            vocab = load_vocab(ws)
        svg_path = ws.report_path(f"heatmap_{tag}_{user_id}.svg")
        count = evaluation.heatmap_export(traj, vocab.skill_names, svg_path)
        entry = {"annotated_cells": count, "svg": svg_path.name}
        if section.coherence_all_skills:
            entry["volatility_all_skills"] = evaluation.volatility_all_skills(traj)
        heatmaps[user_id] = entry
    if heatmaps:
        result["heatmaps"] = heatmaps
    return result


def cmd_evaluate(cfg: RunConfig) -> int:
    ws = Workspace(cfg.workspace)
    with ws.lock():
        manifest = ws.read_manifest()
        stages = manifest.get("stages", {})
        hashes = {
            name: entry.get("vocab_hash")
            for name, entry in stages.items()
            if entry.get("vocab_hash")
        }
        if len(set(hashes.values())) > 1:
            raise RuntimeError(
                f"workspace stages were built against different vocabularies: {hashes}"
            )

        results = {}
        missing = []
        for tag in cfg.evaluate.tags:
            outcome = evaluate_tag(ws, tag, cfg.evaluate)
            if outcome is None:
                missing.append(tag)
                print(f"warning: no prediction dump for tag {tag!r}; skipped")
            else:
                results[tag] = outcome
        if not results:
            raise RuntimeError(f"no dumps found for any requested tag: {missing}")

        write_json(ws.report_path("metrics.json"), results)
        for tag, outcome in results.items():
            line = f"{tag}: "
            if "auc" in outcome:
                line += f"AUC {outcome['auc']:.4f}, accuracy {outcome['confusion']['accuracy']:.4f}"
                line += f", t* {outcome['youden']['threshold']:.4f}"
            else:
                line += outcome.get("auc_error", "no metrics")
            if "coherence" in outcome:
                coh = outcome["coherence"]
                line += (
                    f", volatility {coh['volatility']:.4f}, "
                    f"inconsistency {coh['inconsistency']:.4f}"
                )
            print(line)
        print(f"reports written to {ws.report_path('metrics.json').parent}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(_cfg: Optional[RunConfig]) -> int:
    rng = np.random.default_rng(0)
    k = 5
    net = nncore.init_net(2 * k, 3, 4, k, seed=12)
    b, t = 2, 6
    x_idx = rng.integers(0, 2 * k, size=(b, t))
    s_next = rng.integers(0, k, size=(b, t))
    y_next = rng.integers(0, 2, size=(b, t)).astype(float)
    w = np.ones((b, t))
    w[:, -1] = 0.0
    t0 = time.perf_counter()
    err = nncore.grad_check(net, x_idx, s_next, y_next, w, eps=1e-5)
    wall = time.perf_counter() - t0
    print(
        f"gradient check (embed+GRU+readout+masked BCE, d_in=3, d_h=4, K=5, T=6, B=2): "
        f"max relative error {err:.3e} in {wall:.2f}s"
    )
    if err >= 1e-4:
        print("FAIL: error above 1e-4")
        return 1
    print("PASS")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ktrace",
        description="Knowledge-tracing workflow: prepare data, train the tracer, "
        "probe a served LLM, and evaluate both on a shared schema.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_config in [
        ("prepare", True),
        ("train", True),
        ("probe", True),
        ("evaluate", True),
        ("synth", True),
        ("gradcheck", False),
    ]:
        p = sub.add_parser(name)
        if needs_config:
            p.add_argument("--config", required=True, help="path to the run config JSON")
            p.add_argument(
                "--override",
                action="append",
                default=[],
                metavar="PATH=VALUE",
                help="override a config entry (dotted path, JSON value); repeatable",
            )
        if name == "probe":
            p.add_argument("--tag", default=None, help="override the dump tag")
    return parser


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "synth": cmd_synth,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(None)
        cfg = load_config(args.config, overrides=args.override)
        if args.command == "probe":
            return cmd_probe(cfg, tag_override=args.tag)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ingest.ColumnMappingError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except WorkspaceLocked as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

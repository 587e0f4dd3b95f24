"""Run configuration and the ``disrank`` command-line pipeline.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric divergence,
5 empty or degenerate data.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .datagen import SPLITS, JsonlError, LabeledRecord, SynthConfig, generate_splits, read_jsonl, write_jsonl
from .metrics import format_report, latency_bench, score_histogram, write_histogram_csv, write_report
from .numerics import Prng
from .objectives import Hyperparams
from .textmodel import CheckpointError, ModelConfig, RankerModel, load_checkpoint, save_checkpoint
from .training import (
    LOSS_MODES,
    DegenerateDataError,
    evaluate_model,
    score_records,
    split_validation,
    train_cpt,
    train_distill,
    train_sft,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_DATA = 0, 2, 3, 4, 5
COMMANDS = ("gen-data", "cpt", "sft", "score", "distill", "eval", "bench", "score-dist")


class ConfigError(ValueError):
    pass


def _model_config(d: dict, kind: str, max_seq_len: int) -> ModelConfig:
    base = ModelConfig.teacher if kind == "decoder" else ModelConfig.student
    d = dict(d)
    if d.get("max_seq_len", max_seq_len) != max_seq_len:
        raise ConfigError("model max_seq_len must match the run's max_seq_len")
    if d.get("kind", kind) != kind:
        raise ConfigError(f"expected a {kind} model config")
    d.update(max_seq_len=max_seq_len, kind=kind)
    return base(**d)


@dataclass
class RunConfig:
    out: str = "runs/default"
    seed: int = 0
    max_seq_len: int = 256
    val_queries: int = 100
    score_batch: int = 64
    synth: SynthConfig = field(default_factory=SynthConfig)
    teacher: ModelConfig = field(default_factory=ModelConfig.teacher)
    student: ModelConfig = field(default_factory=ModelConfig.student)
    hp: Hyperparams = field(default_factory=Hyperparams)
    paths: dict = field(default_factory=dict)

    PATH_KEYS = (*SPLITS, "kd_scored", "teacher_cpt", "teacher", "student", "reports", "logs")

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            max_len = int(d.get("max_seq_len", 256))
            synth = dict(d.get("synth", {}))
            synth.setdefault("seed", int(d.get("seed", 0)))
            cfg = cls(
                out=str(d.get("out", cls.out)),
                seed=int(d.get("seed", 0)),
                max_seq_len=max_len,
                val_queries=int(d.get("val_queries", 100)),
                score_batch=int(d.get("score_batch", 64)),
                synth=SynthConfig(**synth),
                teacher=_model_config(d.get("teacher", {}), "decoder", max_len),
                student=_model_config(d.get("student", {}), "encoder", max_len),
                hp=Hyperparams(**d.get("hp", {})),
                paths=dict(d.get("paths", {})),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        bad = sorted(set(cfg.paths) - set(cls.PATH_KEYS))
        if bad:
            raise ConfigError(f"unknown path keys: {bad}")
        if cfg.seed < 0 or cfg.val_queries < 0 or cfg.score_batch < 1:
            raise ConfigError("seed and val_queries must be >= 0, score_batch >= 1")
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def path(self, key: str, loss: str = "hybrid") -> Path:
        if key in self.paths:
            return Path(self.paths[key])
        out = Path(self.out)
        defaults = {
            **{s: out / "data" / f"{s}.jsonl" for s in SPLITS},
            "kd_scored": out / "data" / "kd.scored.jsonl",
            "teacher_cpt": out / "ckpt" / "teacher-cpt.drnk",
            "teacher": out / "ckpt" / "teacher.drnk",
            "student": out / "ckpt" / f"student-{loss}.drnk",
            "reports": out / "reports",
            "logs": out / "logs",
        }
        return defaults[key]


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(d: dict, assignment: str) -> None:
    """Set ``a.b.c=value`` in a nested dict; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, value = assignment.split("=", 1)
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} goes through a non-table value")
    node[parts[-1]] = _parse_value(value)


def load_config(path: str | None, overrides: list[str] = ()) -> RunConfig:
    d: dict = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config file must hold an object")
    for o in overrides:
        apply_override(d, o)
    return RunConfig.from_dict(d)


# --- commands ----------------------------------------------------------------


class Run:
    """Per-command context: config, log sink and the seeded root PRNG."""

    def __init__(self, cfg: RunConfig, command: str, echo: Callable[[str], None] = print):
        self.cfg = cfg
        self.command = command
        self.prng = Prng(cfg.seed)
        self._echo = echo
        self._log_lines: list[str] = []

    def require(self, *paths: Path) -> None:
        for p in paths:
            if not Path(p).exists():
                raise ConfigError(f"input path {p} does not exist")

    def start(self) -> None:
        """Create the run directory and echo the effective config into it."""
        out = Path(self.cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.effective.json").write_text(
            json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        self.cfg.path("logs").mkdir(parents=True, exist_ok=True)
        self._log_path = self.cfg.path("logs") / f"{self.command}.log"
        self._log_path.write_text("", encoding="utf-8")

    def log(self, line: str) -> None:
        self._echo(line)
        with open(self._log_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def rel(self, path) -> str:
        """``path`` relative to the run directory when inside it, so logs do not depend on where the run lives."""
        try:
            return str(Path(path).resolve().relative_to(Path(self.cfg.out).resolve()))
        except ValueError:
            return str(path)

    def read(self, key_or_path) -> list[LabeledRecord]:
        path = self.cfg.path(key_or_path) if key_or_path in RunConfig.PATH_KEYS else Path(key_or_path)
        return read_jsonl(path)


def _ensure_parent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_gen_data(run: Run) -> None:
    cfg = run.cfg
    run.start()
    splits = generate_splits(cfg.synth)
    for split, recs in splits.items():
        write_jsonl(_ensure_parent(cfg.path(split)), recs)
        run.log(f"split={split} records={len(recs)} path={run.rel(cfg.path(split))}")


def init_model(run: Run, which: str) -> RankerModel:
    mc = run.cfg.teacher if which == "teacher" else run.cfg.student
    return RankerModel.init(mc, run.prng.stream(f"init/{which}"))


def cmd_cpt(run: Run) -> None:
    cfg = run.cfg
    run.require(cfg.path("cpt"))
    run.start()
    model = init_model(run, "teacher")
    train_cpt(model, run.read("cpt"), cfg.hp, run.prng.stream("cpt"), log=run.log)
    save_checkpoint(model, _ensure_parent(cfg.path("teacher_cpt")))
    run.log(f"checkpoint={run.rel(cfg.path('teacher_cpt'))}")


def cmd_sft(run: Run, init: str | None = None) -> None:
    cfg = run.cfg
    run.require(cfg.path("sft"), *([init] if init else []))
    records = run.read("sft")
    if init:
        model = load_checkpoint(init)
        if model.config != cfg.teacher:
            raise ConfigError("init checkpoint does not match the configured teacher")
    run.start()
    if not init:
        model = init_model(run, "teacher")
    train, val = split_validation(records, cfg.val_queries, run.prng.stream("sft/val"))
    train_sft(model, train, cfg.hp, run.prng.stream("sft"), cfg.max_seq_len, val, log=run.log)
    save_checkpoint(model, _ensure_parent(cfg.path("teacher")))
    run.log(f"checkpoint={run.rel(cfg.path('teacher'))}")


def cmd_score(run: Run, teacher: str | None = None) -> None:
    cfg = run.cfg
    ckpt = Path(teacher) if teacher else cfg.path("teacher")
    run.require(cfg.path("kd"), ckpt)
    model = load_checkpoint(ckpt)
    if model.kind != "decoder":
        raise ConfigError("score needs a decoder (teacher) checkpoint")
    records = run.read("kd")
    run.start()
    scores, skipped = score_records(model, records, cfg.max_seq_len, cfg.score_batch)
    skip = set(skipped)
    out = [
        LabeledRecord(r.query, r.title, r.summary, r.label, float(s))
        for i, (r, s) in enumerate(zip(records, scores))
        if i not in skip
    ]
    write_jsonl(_ensure_parent(cfg.path("kd_scored")), out)
    if skipped:
        run.log(f"warning=skipped_records count={len(skipped)}")
    run.log(f"scored={len(out)} skipped={len(skipped)} path={run.rel(cfg.path('kd_scored'))}")


def cmd_distill(run: Run, loss: str = "hybrid", scored: str | None = None) -> None:
    cfg = run.cfg
    if loss not in LOSS_MODES:
        raise ConfigError(f"--loss must be one of {LOSS_MODES}")
    src = Path(scored) if scored else cfg.path("kd_scored")
    run.require(src)
    records = run.read(src)
    if any(r.score is None for r in records):
        raise ConfigError(f"{src}: every record needs a teacher score")
    run.start()
    model = init_model(run, "student")
    train_distill(model, records, cfg.hp, run.prng.stream("kd"), cfg.max_seq_len, loss, log=run.log)
    dest = cfg.path("student", loss)
    save_checkpoint(model, _ensure_parent(dest))
    run.log(f"checkpoint={run.rel(dest)}")


def _labeled_split(run: Run, split: str) -> list[LabeledRecord]:
    path = run.cfg.path(split) if split in SPLITS else Path(split)
    run.require(path)
    return read_jsonl(path)


def cmd_eval(run: Run, checkpoint: str, split: str = "test") -> dict:
    cfg = run.cfg
    run.require(checkpoint)
    records = _labeled_split(run, split)
    if not any(r.label is not None for r in records):
        raise DegenerateDataError(f"split {split} has no labels")
    model = load_checkpoint(checkpoint)
    run.start()
    report = evaluate_model(model, records, cfg.max_seq_len, cfg.score_batch)
    tag = f"eval-{Path(checkpoint).stem}-{Path(split).stem}"
    reports = cfg.path("reports")
    reports.mkdir(parents=True, exist_ok=True)
    write_report(report, reports / f"{tag}.txt", reports / f"{tag}.json")
    for line in format_report(report).splitlines():
        run.log(line)
    return report


def cmd_bench(
    run: Run, teacher: str | None = None, student: str | None = None, batch: int = 48, seq_len: int | None = None, iters: int = 10
) -> dict:
    cfg = run.cfg
    run.require(*[p for p in (teacher, student) if p])
    seq_len = seq_len or cfg.max_seq_len
    if iters < 10:
        raise ConfigError("--iters must be >= 10")
    models = {}
    for which, given in (("teacher", teacher), ("student", student)):
        path = Path(given) if given else cfg.path("teacher" if which == "teacher" else "student")
        models[which] = load_checkpoint(path) if path.exists() else None
    run.start()
    rows = {}
    for which, model in models.items():
        if model is None:
            model = init_model(run, which)
        res = latency_bench(model, batch=batch, seq_len=seq_len, iters=iters)
        rows[which] = res
        run.log(f"model={which} params={res.params} batch={batch} seq_len={seq_len} latency_ms={res.mean_ms:.3f}")
    ratio = rows["teacher"].params / rows["student"].params
    run.log(f"param_ratio={ratio:.3f} latency_ratio={rows['teacher'].mean_ms / rows['student'].mean_ms:.3f}")
    reports = cfg.path("reports")
    reports.mkdir(parents=True, exist_ok=True)
    table = "model,params,latency_ms\n" + "".join(f"{k},{v.params},{v.mean_ms:.3f}\n" for k, v in rows.items())
    (reports / "bench.csv").write_text(table, encoding="utf-8")
    return rows


def cmd_score_dist(run: Run, checkpoint: str, split: str = "test", bins: int = 50) -> Path:
    cfg = run.cfg
    if bins < 1:
        raise ConfigError("--bins must be >= 1")
    run.require(checkpoint)
    path = cfg.path(split) if split in SPLITS else Path(split)
    run.require(path)
    records = read_jsonl(path)
    if not records:
        raise DegenerateDataError(f"split {split} is empty")
    model = load_checkpoint(checkpoint)
    run.start()
    scores, _ = score_records(model, records, cfg.max_seq_len, cfg.score_batch)
    hist = score_histogram(scores[np.isfinite(scores)], bins)
    reports = cfg.path("reports")
    reports.mkdir(parents=True, exist_ok=True)
    dest = reports / f"scoredist-{Path(checkpoint).stem}-{Path(split).stem}.csv"
    write_histogram_csv(dest, hist)
    run.log(f"histogram={run.rel(dest)} bins={len(hist)} n={sum(c for _, _, c in hist)}")
    return dest


# --- CLI ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disrank", description="LLM-to-encoder rank distillation pipeline")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="run directory")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("--loss", default="hybrid", choices=LOSS_MODES, help="distill: loss variant")
    parser.add_argument("--init", help="sft: start from this (CPT) checkpoint")
    parser.add_argument("--teacher", help="score/bench: teacher checkpoint")
    parser.add_argument("--student", help="bench: student checkpoint")
    parser.add_argument("--scored", help="distill: teacher-scored KD file")
    parser.add_argument("--checkpoint", help="eval/score-dist: checkpoint to evaluate")
    parser.add_argument("--split", default="test", help="eval/score-dist: split name or JSONL path")
    parser.add_argument("--bins", type=int, default=50)
    parser.add_argument("--batch", type=int, default=48)
    parser.add_argument("--seq-len", type=int)
    parser.add_argument("--iters", type=int, default=10)
    return parser


def dispatch(args: argparse.Namespace, echo: Callable[[str], None] = print) -> None:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={json.dumps(args.out)}")
    cfg = load_config(args.config, overrides)
    run = Run(cfg, args.command, echo)
    c = args.command
    if c in ("eval", "score-dist") and not args.checkpoint:
        raise ConfigError(f"{c} needs --checkpoint")
    if c == "gen-data":
        cmd_gen_data(run)
    elif c == "cpt":
        cmd_cpt(run)
    elif c == "sft":
        cmd_sft(run, args.init)
    elif c == "score":
        cmd_score(run, args.teacher)
    elif c == "distill":
        cmd_distill(run, args.loss, args.scored)
    elif c == "eval":
        cmd_eval(run, args.checkpoint, args.split)
    elif c == "bench":
        cmd_bench(run, args.teacher, args.student, args.batch, args.seq_len, args.iters)
    else:
        cmd_score_dist(run, args.checkpoint, args.split, args.bins)


def main(argv: list[str] | None = None) -> int:
    nx.tune_allocator()
    args = build_parser().parse_args(argv)
    try:
        dispatch(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError, JsonlError) as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_IO
    except nx.NonFiniteError as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DegenerateDataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

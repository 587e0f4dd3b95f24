"""Multi-seed ablations: CPT vs no CPT for the teacher, and the distillation loss variants.

Both run in-process on one synthetic corpus; the training seed varies.
For a given seed every variant starts from the same initial weights and
sees the same shuffles, so the comparisons are paired.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .datagen import LabeledRecord, SynthConfig, generate_splits
from .metrics import latency_bench
from .numerics import Prng
from .objectives import Hyperparams
from .textmodel import ModelConfig, RankerModel
from .training import LOSS_MODES, evaluate_model, score_records, train_cpt, train_distill, train_sft


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(
        default_factory=lambda: SynthConfig(n_queries={"cpt": 2000, "sft": 2000, "kd": 1000, "test": 300})
    )
    max_seq_len: int = 64
    hp: Hyperparams = field(
        default_factory=lambda: Hyperparams(pairs_per_query=2, cpt_epochs=1, sft_epochs=1, kd_epochs=5, kd_batch=4)
    )
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    @property
    def teacher(self) -> ModelConfig:
        return ModelConfig.teacher(max_seq_len=self.max_seq_len)

    @property
    def student(self) -> ModelConfig:
        return ModelConfig.student(max_seq_len=self.max_seq_len)


def _print(line: str) -> None:
    print(line, flush=True)


def cpt_ablation(
    cfg: ExperimentConfig,
    splits: dict[str, list[LabeledRecord]] | None = None,
    log: Callable[[str], None] = _print,
) -> dict:
    """Test PNR of CPT->SFT and SFT-only teachers per seed.

    Returns per-seed reports, the CPT->SFT teachers (for reuse by
    :func:`distill_ablation`) and the wall-clock time.
    """
    t0 = time.perf_counter()
    splits = splits or generate_splits(cfg.synth)
    results, teachers = {}, {}
    for seed in cfg.seeds:
        prng = Prng(seed)
        row = {}
        for variant in ("sft_only", "cpt_sft"):
            model = RankerModel.init(cfg.teacher, prng.stream("init/teacher"))
            if variant == "cpt_sft":
                train_cpt(model, splits["cpt"], cfg.hp, prng.stream("cpt"))
            train_sft(model, splits["sft"], cfg.hp, prng.stream("sft"), cfg.max_seq_len)
            row[variant] = evaluate_model(model, splits["test"], cfg.max_seq_len)
            log(f"seed={seed} teacher={variant} pnr={row[variant]['pnr']:.4f} ndcg@5={row[variant]['ndcg@5']:.4f}")
        teachers[seed] = model
        results[seed] = row
    return {"results": results, "teachers": teachers, "seconds": time.perf_counter() - t0}


def scored_kd(teacher: RankerModel, records: list[LabeledRecord], max_len: int) -> list[LabeledRecord]:
    scores, skipped = score_records(teacher, records, max_len)
    skip = set(skipped)
    return [
        LabeledRecord(r.query, r.title, r.summary, score=float(s))
        for i, (r, s) in enumerate(zip(records, scores))
        if i not in skip
    ]


def distill_ablation(
    cfg: ExperimentConfig,
    teachers: dict[int, RankerModel],
    splits: dict[str, list[LabeledRecord]] | None = None,
    log: Callable[[str], None] = _print,
) -> dict:
    """Test PNR of untrained, point-, margin- and hybrid-distilled students per seed."""
    t0 = time.perf_counter()
    splits = splits or generate_splits(cfg.synth)
    results = {}
    for seed in cfg.seeds:
        prng = Prng(seed)
        kd = scored_kd(teachers[seed], splits["kd"], cfg.max_seq_len)
        init = RankerModel.init(cfg.student, prng.stream("init/student"))
        row = {"untrained": evaluate_model(init, splits["test"], cfg.max_seq_len)}
        for mode in LOSS_MODES:
            student = copy.deepcopy(init)
            train_distill(student, kd, cfg.hp, prng.stream("kd"), cfg.max_seq_len, mode)
            row[mode] = evaluate_model(student, splits["test"], cfg.max_seq_len)
        log(f"seed={seed} " + " ".join(f"{k}={v['pnr']:.4f}" for k, v in row.items()))
        results[seed] = row
    return {"results": results, "seconds": time.perf_counter() - t0}


def mean_metric(results: dict, variant: str, key: str = "pnr") -> float:
    return float(np.mean([row[variant][key] for row in results.values()]))


def bench_default_models(batch: int = 48, seq_len: int = 256, iters: int = 10, seed: int = 0) -> dict:
    """Latency and parameter counts of the default-size teacher and student."""
    prng = Prng(seed)
    out = {}
    for which, mc in (("teacher", ModelConfig.teacher()), ("student", ModelConfig.student())):
        model = RankerModel.init(mc, prng.stream(f"init/{which}"))
        out[which] = latency_bench(model, batch=batch, seq_len=seq_len, iters=iters)
    return out

"""Evaluation protocol: two samples per case, three probe similarities, CSV reports."""

from __future__ import annotations

import csv
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..diffusion import GuidanceConfig
from .dataset import SPLITS, GroupRecord

SAMPLES_PER_CASE = 2
REPORT_HEADER = ("case_id", "group_id", "target_index", "num_refs", "tokens",
                 "clip_i", "clip_t", "dino_i")
TIMING_HEADER = ("case_id", "seconds_per_image")


@dataclass
class Case:
    case_id: str
    group_id: str
    target_index: int
    refs: list
    target: np.ndarray
    caption: str


@dataclass(frozen=True)
class EvalConfig:
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    samples: int = SAMPLES_PER_CASE
    seed: int = 0
    workers: int = 1
    max_cases: int | None = None


@dataclass
class MetricsReport:
    split: str
    clip_i: float = float("nan")
    clip_t: float = float("nan")
    dino_i: float = float("nan")
    per_group: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    avg_tokens: float = float("nan")
    latency: float = float("nan")
    timings: dict = field(default_factory=dict)
    samples_per_case: int = SAMPLES_PER_CASE
    failed: bool = False
    note: str = ""

    @property
    def triple(self) -> tuple[float, float, float]:
        return self.clip_i, self.clip_t, self.dino_i

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_HEADER)
            for row in self.rows:
                writer.writerow([_fmt(row[k]) for k in REPORT_HEADER])

    def write_timing(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TIMING_HEADER)
            for case_id, seconds in self.timings.items():
                writer.writerow([case_id, f"{seconds:.6f}"])

    def summary(self) -> dict:
        return {"split": self.split, "clip_i": self.clip_i, "clip_t": self.clip_t,
                "dino_i": self.dino_i, "avg_tokens": self.avg_tokens, "latency": self.latency,
                "cases": len(self.rows), "failed": self.failed}


def _fmt(value):
    return repr(float(value)) if isinstance(value, (float, np.floating)) else value


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    return float(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12), -1.0, 1.0))


def score_images(generated, target: np.ndarray, caption: str, probes) -> dict:
    """Mean over generated images of the three probe similarities."""
    ta, tb, tt = probes.embed_a(target), probes.embed_b(target), probes.embed_text(caption)
    vals = np.array([[cosine(probes.embed_a(g), ta), cosine(probes.embed_a(g), tt),
                      cosine(probes.embed_b(g), tb)] for g in generated])
    clip_i, clip_t, dino_i = vals.mean(axis=0)
    return {"clip_i": float(clip_i), "clip_t": float(clip_t), "dino_i": float(dino_i)}


def evaluation_cases(groups: list[GroupRecord], split: str) -> list[Case]:
    """Every designated target of the split, with the rest of its group as references."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    chosen = [g for g in groups if g.split == split]
    if not chosen:
        raise ValueError(f"manifest has no {split} groups")
    cases = []
    for g in chosen:
        for i in range(len(g)):
            if g.targets[i]:
                refs = [g.images[j] for j in range(len(g)) if j != i]
                cases.append(Case(f"{g.group_id}:{i}", g.group_id, i, refs, g.images[i], g.captions[i]))
    return cases


def case_seed(seed: int, case_id: str) -> int:
    return int(np.random.default_rng([seed, zlib.crc32(case_id.encode())]).integers(2**31))


def model_generator(model, guidance: GuidanceConfig) -> Callable:
    """``generate(case, seed, n) -> (images, token_count)`` backed by ``model.sample``."""
    def generate(case: Case, seed: int, n: int):
        images = model.sample(case.refs, case.caption, guidance, seed=seed,
                              shape=case.target.shape, num_samples=n)
        return images, model.token_count(len(case.refs)) if case.refs else 0
    return generate


def evaluate(model, groups: list[GroupRecord], split: str, probes, cfg: EvalConfig = EvalConfig(),
             generator: Callable | None = None) -> MetricsReport:
    """Score ``model`` (or a custom ``generator``) on every case of ``split``."""
    if probes is None:
        raise ValueError("evaluation needs trained probes")
    if model is None and generator is None:
        raise ValueError("evaluation needs a model or a generator")
    generate = generator or model_generator(model, cfg.guidance)
    cases = evaluation_cases(groups, split)
    if cfg.max_cases is not None:
        cases = cases[: cfg.max_cases]

    def run(case: Case):
        start = time.perf_counter()
        images, tokens = generate(case, case_seed(cfg.seed, case.case_id), cfg.samples)
        elapsed = (time.perf_counter() - start) / cfg.samples
        if len(images) != cfg.samples:
            raise RuntimeError(f"generator returned {len(images)} images, expected {cfg.samples}")
        scores = score_images(images, case.target, case.caption, probes)
        row = {"case_id": case.case_id, "group_id": case.group_id, "target_index": case.target_index,
               "num_refs": len(case.refs), "tokens": int(tokens), **scores}
        return row, elapsed

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(run, cases))
    else:
        results = [run(c) for c in cases]
    order = sorted(range(len(cases)), key=lambda k: cases[k].case_id)
    rows = [results[k][0] for k in order]
    timings = {cases[k].case_id: results[k][1] for k in order}
    return build_report(split, rows, timings, cfg.samples)


def build_report(split: str, rows: list[dict], timings: dict, samples: int) -> MetricsReport:
    per_group: dict = {}
    for row in rows:
        per_group.setdefault(row["group_id"], []).append(row)
    group_means = {gid: {k: float(np.mean([r[k] for r in rs])) for k in ("clip_i", "clip_t", "dino_i")}
                   for gid, rs in sorted(per_group.items())}
    agg = {k: float(np.mean([m[k] for m in group_means.values()])) for k in ("clip_i", "clip_t", "dino_i")}
    return MetricsReport(
        split=split, per_group=group_means, rows=rows, timings=timings, samples_per_case=samples,
        avg_tokens=float(np.mean([r["tokens"] for r in rows])),
        latency=float(np.mean(list(timings.values()))) if timings else float("nan"), **agg,
    )


def failed_report(split: str, note: str) -> MetricsReport:
    return MetricsReport(split=split, failed=True, note=note)


def write_reports(report: MetricsReport, out_dir, name: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics, timing = out_dir / f"{name}.csv", out_dir / f"{name}_timing.csv"
    report.write_csv(metrics)
    report.write_timing(timing)
    return metrics, timing

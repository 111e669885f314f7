"""Comparison experiments: aggregation variants, token design, reference-count scaling
and a per-group LoRA finetuning baseline."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from ..autodiff import Adam, count_flops, no_grad
from ..diffusion import training_loss
from .dataset import GroupRecord
from .evaluate import (
    Case,
    EvalConfig,
    MetricsReport,
    case_seed,
    evaluate,
    failed_report,
    score_images,
)


@dataclass
class Table:
    header: tuple
    rows: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header)
            for row in self.rows:
                writer.writerow([repr(float(row[k])) if isinstance(row[k], (float, np.floating)) else row[k]
                                 for k in self.header])

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows]

    def by(self, key: str) -> dict:
        return {row[key]: row for row in self.rows}


def as_split(groups: list[GroupRecord], split: str) -> list[GroupRecord]:
    """Relabel ``groups`` as ``split`` with every image a target."""
    return [replace(g, split=split, targets=[True] * len(g)) for g in groups]


# -- aggregation ---------------------------------------------------------------
def check_variants(models: dict) -> None:
    """Variants may differ in aggregation only."""
    configs = {name: m.cfg.without_aggregation() for name, m in models.items()}
    first_name, first = next(iter(configs.items()))
    for name, cfg in configs.items():
        if cfg != first:
            raise ValueError(f"variant {name!r} differs from {first_name!r} beyond aggregation")


def ablate_aggregation(models: dict, groups: list[GroupRecord], probes, cfg: EvalConfig = EvalConfig(),
                       stressor: tuple | None = None, split: str = "held-out") -> tuple[Table, Table | None, dict]:
    """Metric triples and token counts per variant, plus an aligned/misaligned stressor table.

    ``stressor`` is ``(aligned_groups, misaligned_groups)``; the stressor
    table reports each variant's consistency (probe-B similarity) on both
    and the drop between them.
    """
    check_variants(models)
    table = Table(("variant", "clip_i", "clip_t", "dino_i", "avg_tokens", "cases"))
    reports = {}
    for name, model in models.items():
        rep = evaluate(model, groups, split, probes, cfg)
        reports[name] = rep
        table.rows.append({"variant": name, "clip_i": rep.clip_i, "clip_t": rep.clip_t,
                           "dino_i": rep.dino_i, "avg_tokens": rep.avg_tokens, "cases": len(rep.rows)})
    stress = None
    if stressor is not None:
        aligned, misaligned = (as_split(gs, split) for gs in stressor)
        stress = Table(("variant", "aligned_dino_i", "misaligned_dino_i", "drop",
                        "aligned_clip_i", "misaligned_clip_i"))
        for name, model in models.items():
            a = evaluate(model, aligned, split, probes, cfg)
            m = evaluate(model, misaligned, split, probes, cfg)
            reports[f"{name}/aligned"], reports[f"{name}/misaligned"] = a, m
            stress.rows.append({"variant": name, "aligned_dino_i": a.dino_i, "misaligned_dino_i": m.dino_i,
                                "drop": a.dino_i - m.dino_i, "aligned_clip_i": a.clip_i,
                                "misaligned_clip_i": m.clip_i})
    return table, stress, reports


# -- timing and op counts -------------------------------------------------------------
def encoder_latency(model, refs, prompt: str = "", repeats: int = 3) -> float:
    """Best-of-``repeats`` wall-clock seconds for one image-condition encoding."""
    best = float("inf")
    with no_grad():
        for _ in range(repeats):
            start = time.perf_counter()
            model.image_condition(refs, prompt)
            best = min(best, time.perf_counter() - start)
    return best


def step_flops(model, refs, prompt: str, shape: tuple) -> dict:
    """Matmul FLOPs of one encoding and of one denoiser evaluation."""
    with no_grad(), count_flops() as flops:
        c_t = model.text_condition(prompt)
        c_i = model.image_condition(refs, prompt)
        model.eps(np.zeros((1,) + tuple(shape)), np.array([0]), c_t, c_i)
    return {"encoder": flops.by_tag.get("encoder", 0), "denoiser": flops.by_tag.get("denoiser", 0)}


# -- token design ---------------------------------------------------------------
def ablate_tokens(models: dict, groups: list[GroupRecord], probes, cfg: EvalConfig = EvalConfig(),
                  timing_refs: list | None = None, split: str = "held-out",
                  evaluate_metrics: bool = True) -> Table:
    """``models`` maps ``(num_tokens, position)`` to a model; position ``-p`` means
    reference tokens enter before the p-th block from the end."""
    table = Table(("num_tokens", "position", "clip_i", "clip_t", "dino_i", "encoder_seconds",
                   "encoder_flops"))
    for (n, pos), model in sorted(models.items()):
        row = {"num_tokens": n, "position": pos, "clip_i": float("nan"), "clip_t": float("nan"),
               "dino_i": float("nan"), "encoder_seconds": float("nan"), "encoder_flops": 0}
        if evaluate_metrics:
            rep = evaluate(model, groups, split, probes, cfg)
            row.update(clip_i=rep.clip_i, clip_t=rep.clip_t, dino_i=rep.dino_i)
        if timing_refs:
            row["encoder_seconds"] = encoder_latency(model, timing_refs)
            row["encoder_flops"] = step_flops(model, timing_refs, "", timing_refs[0].shape)["encoder"]
        table.rows.append(row)
    return table


# -- reference-count scaling -----------------------------------------------------------
def scale_references(model, group: GroupRecord, sizes, probes, cfg: EvalConfig = EvalConfig(),
                     target_index: int | None = None) -> Table:
    """Metrics, token count, latency and op counts as functions of the reference count K."""
    target_index = len(group) - 1 if target_index is None else target_index
    pool = [group.images[i] for i in range(len(group)) if i != target_index]
    target, caption = group.images[target_index], group.captions[target_index]
    table = Table(("K", "tokens", "clip_i", "clip_t", "dino_i", "seconds_per_image",
                   "encoder_seconds", "encoder_flops", "denoiser_flops_per_step"))
    case_id = f"{group.group_id}:{target_index}"
    for k in sizes:
        if k > len(pool):
            raise ValueError(f"group {group.group_id} has only {len(pool)} references, asked for {k}")
        refs = pool[:k]
        start = time.perf_counter()
        images = model.sample(refs, caption, cfg.guidance, seed=case_seed(cfg.seed, case_id),
                              shape=target.shape, num_samples=cfg.samples)
        per_image = (time.perf_counter() - start) / cfg.samples
        flops = step_flops(model, refs, caption, target.shape)
        table.rows.append({"K": k, "tokens": model.token_count(k),
                           **score_images(images, target, caption, probes),
                           "seconds_per_image": per_image,
                           "encoder_seconds": encoder_latency(model, refs, caption),
                           "encoder_flops": flops["encoder"],
                           "denoiser_flops_per_step": flops["denoiser"]})
    return table


# -- per-group LoRA finetuning baseline --------------------------------------------------
def lora_baseline(base_factory, groups: list[GroupRecord], split: str, probes,
                  cfg: EvalConfig = EvalConfig(), max_groups: int = 4, steps: int = 100,
                  lr: float = 1e-3, noise_draws: int = 8, seed: int = 0) -> MetricsReport:
    """Finetune the denoiser's LoRA on each group's references, then generate from text.

    Groups never seen in training have nothing to finetune on at evaluation
    time, so the held-out split reports a failed row.
    """
    if split == "held-out":
        return failed_report(split, "per-group finetuning is unavailable for unseen groups")
    chosen = [g for g in groups if g.split == split][:max_groups]
    if not chosen:
        raise ValueError(f"manifest has no {split} groups")
    tuned = {}
    for gi, g in enumerate(chosen):
        model = base_factory()
        model.set_trainable(["denoiser.*.lora.*"])
        optim = Adam([p for p in model.parameters() if p.trainable], lr=lr, grad_clip=1.0)
        refs = [(g.images[i], g.captions[i]) for i in range(len(g)) if not g.targets[i]]
        for step in range(steps):
            rng = np.random.default_rng([seed, gi, step])
            img, caption = refs[int(rng.integers(len(refs)))]
            t = rng.integers(0, model.schedule.T, size=noise_draws)
            eps = rng.standard_normal((noise_draws,) + img.shape)
            optim.zero_grad()
            with no_grad():
                c_t = model.text_condition(caption)
            loss = training_loss(model.eps, np.broadcast_to(img, (noise_draws,) + img.shape),
                                 c_t, None, t, eps, model.schedule)
            loss.backward()
            optim.step()
        tuned[g.group_id] = model

    def generate(case: Case, case_seed_: int, n: int):
        model = tuned[case.group_id]
        return model.sample([], case.caption, cfg.guidance, seed=case_seed_,
                            shape=case.target.shape, num_samples=n), 0

    return evaluate(None, chosen, split, probes, cfg, generator=generate)

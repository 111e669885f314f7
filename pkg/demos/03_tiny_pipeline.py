"""
The four training stages end to end on a small model, then a few samples and
a benchmark score. Everything is shrunk so it finishes in a few minutes on one
CPU core; expect blurry samples. The full-size run is what ``multiref train``
does with its defaults.

    python demos/03_tiny_pipeline.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from multiref.benchmark.dataset import GenSpec, audit_splits, generate_dataset, make_splits
from multiref.benchmark.evaluate import EvalConfig, evaluate
from multiref.benchmark.probes import ProbeConfig, train_probes
from multiref.denoiser import DenoiserConfig
from multiref.diffusion import GuidanceConfig
from multiref.encoder import EncoderConfig
from multiref.images import write_ppm
from multiref.model import ModelConfig
from multiref.training import TrainingData, default_plan, loss_window_means, run_stage

workdir = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="multiref-demo-"))
print("workdir:", workdir)

# %% data
groups = make_splits(generate_dataset(GenSpec(groups=60, seed=5)), held_out_groups=4, held_in_groups=6)
print("splits:", {s: sum(g.split == s for g in groups) for s in ("train", "held-in", "held-out")})
print("audit:", audit_splits(groups))
data = TrainingData(groups)

cfg = ModelConfig(
    encoder=EncoderConfig(layers=2, dim=32, heads=2, num_ref_tokens=16, cond_dim=32),
    denoiser=DenoiserConfig(blocks=2, dim=32, heads=2, cond_dim=32),
    lora_rank=4,
)

# %% stages 0-3
steps = {0: 300, 1: 150, 2: 150, 3: 150}
for stage, n in steps.items():
    plan = default_plan(stage, steps=n, examples=8, save_every=0)
    model, rows = run_stage(plan, data, workdir, cfg)
    first, last = loss_window_means(rows, 50)
    print(f"stage {stage}: {n} steps, loss {first:.3f} -> {last:.3f}")

# %% sample from held-out references
group = next(g for g in groups if g.split == "held-out")
guidance = GuidanceConfig(scale=5.0, steps=20)
images = model.sample(group.images[1:], group.captions[0], guidance, seed=0, num_samples=2)
for k, img in enumerate(images):
    write_ppm(workdir / f"sample_{k}.ppm", img)
write_ppm(workdir / "target.ppm", group.images[0])
print("wrote", sorted(p.name for p in workdir.glob("*.ppm")))

# %% a quick score with freshly trained (small) probes
probes = train_probes(ProbeConfig(steps=150, groups=120))
report = evaluate(model, groups, "held-out", probes, EvalConfig(guidance=guidance, max_cases=4))
print("held-out clip_i / clip_t / dino_i:", np.round(report.triple, 3), " tokens:", report.avg_tokens)

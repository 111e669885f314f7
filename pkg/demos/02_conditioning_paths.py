"""
How reference images become a condition, and where it enters the denoiser.

Builds an untrained model, then looks at:
  * the number of condition rows for each aggregation as K grows
  * that zero-initialised adapters leave the base denoiser untouched
  * where the compute goes per denoising step
"""
import numpy as np

from multiref.autodiff import count_flops, no_grad
from multiref.benchmark.dataset import GenSpec, generate_dataset
from multiref.model import ModelConfig, MultiRefModel

groups = generate_dataset(GenSpec(groups=4, seed=3, min_group_size=6, max_group_size=8))
refs = groups[0].images
prompt = groups[0].captions[0]
print("prompt:", prompt)
print("reference shapes:", [r.shape for r in refs])

models = {agg: MultiRefModel(ModelConfig(aggregation=agg)) for agg in ("tokens", "average", "concat")}

# %% condition size against number of references
print("\nrows of the image condition")
print("  K   tokens  average  concat")
with no_grad():
    for k in (1, 2, 4, len(refs)):
        rows = [models[a].image_condition(refs[:k], prompt).shape[0] for a in ("tokens", "average", "concat")]
        print(f"{k:3d}  {rows[0]:7d}  {rows[1]:7d}  {rows[2]:6d}")

# %% adapters start as an exact no-op
model = models["tokens"]
rng = np.random.default_rng(0)
x_t = rng.normal(size=(1, 16, 16, 3)).astype(np.float32)
t = np.array([120])
with no_grad():
    c_t = model.text_condition(prompt)
    c_i = model.image_condition(refs, prompt)
    before = model.eps(x_t, t, c_t, None).data
    model.install_adapters()
    after = model.eps(x_t, t, c_t, c_i).data
print("\nzero adapters change the output:", not np.array_equal(before, after))

# %% compute per step
print("\nFLOPs for one conditional denoiser call, split by component")
for k in (1, 3, len(refs)):
    with no_grad(), count_flops() as counter:
        c_i = model.image_condition(refs[:k], prompt)
        model.eps(x_t, t, model.text_condition(prompt), c_i)
    print(f"  K={k}: encoder {counter['encoder']:>11,d}   denoiser {counter['denoiser']:>9,d}")

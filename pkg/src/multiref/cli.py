"""Command-line entry point: dataset, train, sample, eval, ablate, audit.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .benchmark import ablations
from .benchmark.dataset import (
    FilterThresholds,
    GenSpec,
    audit_splits,
    filter_groups,
    generate_dataset,
    load_manifest,
    make_splits,
    rerender,
    save_manifest,
)
from .benchmark.evaluate import EvalConfig, evaluate, write_reports
from .benchmark.probes import ProbeConfig, ProbeSet, load_or_train
from .config import ConfigError, RunConfig
from .diffusion import GuidanceConfig
from .encoder import EncoderConfig
from .images import read_ppm, write_ppm
from .model import ModelConfig, MultiRefModel
from .training import DropoutConfig, TrainingData, default_plan, new_training_model, run_stage


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- config plumbing -----------------------------------------------------------
def resolve_config(args, flag_map: dict) -> RunConfig:
    overrides = {}
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    return RunConfig.load(getattr(args, "config", None), overrides)


def model_config(cfg: RunConfig, **changes) -> ModelConfig:
    enc = EncoderConfig(layers=cfg["model.encoder_layers"], num_ref_tokens=cfg["model.num_ref_tokens"],
                        ref_insert_depth=cfg["model.ref_insert_depth"],
                        bidirectional=cfg["model.bidirectional"])
    out = ModelConfig(encoder=enc, aggregation=cfg["model.aggregation"], lora_rank=cfg["model.lora_rank"],
                      T=cfg["model.T"], image_side=cfg["data.image_side"])
    return replace(out, **changes) if changes else out


def config_from_checkpoint(tensors: dict, base: ModelConfig, aggregation: str | None = None) -> ModelConfig:
    """Read token count and block layout off the stored tensor shapes."""
    agg_blocks = {int(m.group(1)) for k in tensors if (m := re.match(r"encoder\.agg\.(\d+)\.", k))}
    ctx_blocks = {int(m.group(1)) for k in tensors if (m := re.match(r"encoder\.blocks\.(\d+)\.", k))}
    enc = base.encoder
    if "encoder.ref_tokens" in tensors and agg_blocks:
        depth = len(agg_blocks)
        enc = replace(enc, num_ref_tokens=tensors["encoder.ref_tokens"].shape[0],
                      ref_insert_depth=depth, layers=depth + len(ctx_blocks))
    lora = [v for k, v in tensors.items() if k.endswith(".lora.a")]
    return replace(base, encoder=enc, aggregation=aggregation or base.aggregation,
                   lora_rank=lora[0].shape[0] if lora else base.lora_rank)


def load_model(path, cfg: RunConfig, aggregation: str | None = None) -> MultiRefModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    tensors = checkpoint.load(path)
    mcfg = config_from_checkpoint(tensors, model_config(cfg), aggregation)
    model = MultiRefModel(mcfg)
    adapters, lora = MultiRefModel.structure_of(tensors)
    model.ensure_structure(adapters, lora)
    model.load_state_dict({k: v for k, v in tensors.items()
                           if k.startswith(("encoder.", "text_cond.", "denoiser."))})
    return model


def probe_config(cfg: RunConfig) -> ProbeConfig:
    return ProbeConfig(steps=cfg["probe.steps"], groups=cfg["probe.groups"], data_seed=cfg["probe.data_seed"])


def find_probes(args, cfg: RunConfig, out_dir: Path) -> ProbeSet:
    if args.probes:
        if not Path(args.probes).exists():
            raise FileNotFoundError(f"probe file not found: {args.probes}")
        return ProbeSet.load(args.probes, probe_config(cfg))
    beside = Path(args.manifest).parent / "probes.ezrf" if Path(args.manifest).is_file() \
        else Path(args.manifest) / "probes.ezrf"
    if beside.exists():
        return ProbeSet.load(beside, probe_config(cfg))
    return load_or_train(out_dir / "probes.ezrf", probe_config(cfg))


def eval_config(cfg: RunConfig) -> EvalConfig:
    guidance = GuidanceConfig(scale=cfg["sample.scale"], steps=cfg["sample.steps"], uncond=cfg["sample.uncond"])
    return EvalConfig(guidance=guidance, samples=cfg["eval.samples"], seed=cfg["seed"],
                      workers=cfg["eval.workers"], max_cases=cfg["eval.max_cases"] or None)


def gen_spec(cfg: RunConfig) -> GenSpec:
    spec = GenSpec(groups=cfg["data.groups"], min_group_size=cfg["data.min_group_size"],
                   max_group_size=cfg["data.max_group_size"], image_side=cfg["data.image_side"],
                   aspect_prob=cfg["data.aspect_prob"], misalignment=cfg["data.misalignment"],
                   distractor_prob=cfg["data.distractor_prob"], pixel_noise=cfg["data.pixel_noise"],
                   seed=cfg["seed"])
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return spec


def load_groups(manifest, split: str | None = None):
    path = Path(manifest)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    groups = load_manifest(path)
    if split is not None and not any(g.split == split for g in groups):
        raise UsageError(f"manifest has no groups labelled {split!r}")
    return groups


# -- commands --------------------------------------------------------------------
def cmd_dataset(args) -> int:
    cfg = resolve_config(args, {"groups": "data.groups", "seed": "seed", "min_group_size": "data.min_group_size",
                                "max_group_size": "data.max_group_size", "filter": "data.filter",
                                "held_out": "data.held_out_groups", "held_in": "data.held_in_groups"})
    spec = gen_spec(cfg)
    out = Path(args.out)
    groups = generate_dataset(spec)
    if cfg["data.filter"] or args.probes:
        probes = load_or_train(out / "probes.ezrf", probe_config(cfg))
        if cfg["data.filter"]:
            groups = filter_groups(groups, probes, FilterThresholds(
                cfg["data.threshold_a"], cfg["data.threshold_b"], cfg["data.threshold_caption"]))
    groups = make_splits(groups, cfg["data.held_out_groups"], cfg["data.held_in_groups"], cfg["seed"])
    path = save_manifest(groups, out)
    cfg.echo(out)
    report = audit_splits(groups)
    print(f"wrote {path} ({len(groups)} groups, {sum(len(g) for g in groups)} images)")
    print(json.dumps(report, sort_keys=True))
    return 0 if report["ok"] else 2


def cmd_audit(args) -> int:
    report = audit_splits(load_groups(args.manifest))
    print(json.dumps(report, sort_keys=True))
    return 0 if report["ok"] else 2


def cmd_train(args) -> int:
    cfg = resolve_config(args, {"steps": "train.steps", "lr": "train.lr", "seed": "seed",
                                "aggregation": "model.aggregation"})
    groups = load_groups(args.manifest)
    overrides = dict(noise_draws=cfg["train.noise_draws"], save_every=cfg["train.save_every"],
                     crop_prob=cfg["train.crop_prob"], augment=cfg["train.augment"], seed=cfg["seed"])
    if cfg["train.examples"] > 0:
        overrides["examples"] = cfg["train.examples"]
    if cfg["train.steps"] >= 0:
        overrides["steps"] = cfg["train.steps"]
    if cfg["train.lr"] > 0:
        overrides["lr"] = cfg["train.lr"]
    if args.stage > 0:
        overrides["dropout"] = DropoutConfig(cfg["train.p_text"], cfg["train.p_image"], cfg["train.p_joint"])
    plan = default_plan(args.stage, **overrides)
    workdir = Path(args.workdir)
    cfg.echo(workdir, f"config.stage{args.stage}.txt")
    data = TrainingData(groups, cfg["data.image_side"])

    def progress(step, loss):
        if args.verbose and (step % 100 == 0 or step == plan.steps - 1):
            print(f"stage {args.stage} step {step} loss {loss:.5f}", flush=True)

    _, rows = run_stage(plan, data, workdir, model_config(cfg), resume=args.resume, init=args.init,
                        progress=progress)
    if rows:
        losses = np.array([r[2] for r in rows])
        w = min(100, len(losses))
        print(f"stage {args.stage}: {len(rows)} steps, first-{w} mean {losses[:w].mean():.5f}, "
              f"last-{w} mean {losses[-w:].mean():.5f}")
    print(f"wrote {workdir / f'stage{args.stage}.ezrf'}")
    return 0


def cmd_sample(args) -> int:
    cfg = resolve_config(args, {"seed": "seed", "scale": "sample.scale", "steps": "sample.steps",
                                "num": "sample.num", "aggregation": "model.aggregation"})
    model = load_model(args.checkpoint, cfg)
    refs = []
    for path in args.refs or []:
        if not Path(path).exists():
            raise FileNotFoundError(f"reference image not found: {path}")
        refs.append(read_ppm(path))
    guidance = GuidanceConfig(scale=cfg["sample.scale"], steps=cfg["sample.steps"], uncond=cfg["sample.uncond"])
    h = args.height or cfg["data.image_side"]
    w = args.width or cfg["data.image_side"]
    images = model.sample(refs, args.prompt, guidance, seed=cfg["seed"], shape=(h, w, 3),
                          num_samples=cfg["sample.num"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    for i, img in enumerate(images):
        write_ppm(out / f"sample_{i:02d}.ppm", img)
        checkpoint.save(out / f"sample_{i:02d}.ezrf", {"image": img})
    print(f"wrote {len(images)} image(s) to {out} ({len(refs)} reference(s))")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args, {"seed": "seed", "aggregation": "model.aggregation", "max_cases": "eval.max_cases",
                                "workers": "eval.workers", "steps": "sample.steps", "scale": "sample.scale"})
    groups = load_groups(args.manifest, args.split)
    out = Path(args.out)
    model = load_model(args.checkpoint, cfg)
    probes = find_probes(args, cfg, out)
    report = evaluate(model, groups, args.split, probes, eval_config(cfg))
    metrics, _ = write_reports(report, out, f"eval_{args.split}")
    cfg.echo(out)
    (out / f"eval_{args.split}_summary.json").write_text(json.dumps(report.summary(), sort_keys=True, indent=1))
    print(json.dumps(report.summary(), sort_keys=True))
    print(f"wrote {metrics}")
    return 0


def _named_checkpoints(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--checkpoint expects name=path, got {item!r}")
        name, path = item.split("=", 1)
        out[name] = path
    if not out:
        raise UsageError("at least one --checkpoint name=path is required")
    return out


def cmd_ablate(args) -> int:
    cfg = resolve_config(args, {"seed": "seed", "max_cases": "eval.max_cases", "steps": "sample.steps",
                                "scale": "sample.scale"})
    groups = load_groups(args.manifest, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    probes = find_probes(args, cfg, out)
    ecfg = eval_config(cfg)
    named = _named_checkpoints(args.checkpoint)
    if args.kind == "aggregation":
        models = {name: load_model(path, cfg, aggregation=name if name in ("tokens", "average", "concat") else None)
                  for name, path in named.items()}
        split_groups = [g for g in groups if g.split == args.split]
        spec = GenSpec(image_side=cfg["data.image_side"])
        stressor = (rerender(split_groups, False, spec, cfg["seed"]), rerender(split_groups, True, spec, cfg["seed"]))
        table, stress, _ = ablations.ablate_aggregation(models, groups, probes, ecfg, stressor, args.split)
        table.write_csv(out / "ablate_aggregation.csv")
        stress.write_csv(out / "ablate_aggregation_stressor.csv")
    elif args.kind == "tokens":
        models = {}
        for name, path in named.items():
            m = load_model(path, cfg)
            models[(m.cfg.encoder.num_ref_tokens, -m.cfg.encoder.ref_insert_depth)] = m
        first = next(g for g in groups if g.split == args.split)
        table = ablations.ablate_tokens(models, groups, probes, ecfg, timing_refs=first.images, split=args.split)
        table.write_csv(out / "ablate_tokens.csv")
    elif args.kind == "scaling":
        name, path = next(iter(named.items()))
        model = load_model(path, cfg)
        group = max((g for g in groups if g.split == args.split), key=len)
        sizes = [k for k in (args.sizes or [1, 2, 4, 8, 16, 28]) if k < len(group)]
        table = ablations.scale_references(model, group, sizes, probes, ecfg)
        table.write_csv(out / "scale_references.csv")
    else:
        name, path = next(iter(named.items()))
        report = ablations.lora_baseline(lambda: load_model(path, cfg), groups, args.split, probes, ecfg)
        if report.failed:
            (out / "lora_baseline.csv").write_text(f"split,status\n{args.split},failed\n")
        else:
            write_reports(report, out, "lora_baseline")
        print(json.dumps(report.summary(), sort_keys=True))
    cfg.echo(out)
    print(f"wrote ablation outputs to {out}")
    return 0


# -- parser ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="multiref", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, manifest=False):
        p.add_argument("--config", help="key=value run config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
        p.add_argument("--seed", type=int)
        if manifest:
            p.add_argument("--manifest", required=True, help="manifest.jsonl or its directory")

    p = sub.add_parser("dataset", help="generate, filter and split a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--groups", type=int)
    p.add_argument("--min-group-size", dest="min_group_size", type=int)
    p.add_argument("--max-group-size", dest="max_group_size", type=int)
    p.add_argument("--held-out", dest="held_out", type=int)
    p.add_argument("--held-in", dest="held_in", type=int)
    p.add_argument("--filter", action="store_const", const=True)
    p.add_argument("--probes", action="store_true", help="also train and store metric probes")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("audit", help="check split hygiene of a manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("train", help="run one training stage")
    common(p, manifest=True)
    p.add_argument("--stage", type=int, required=True, choices=[0, 1, 2, 3])
    p.add_argument("--workdir", required=True, help="directory holding stage checkpoints")
    p.add_argument("--init", help="input checkpoint (default: previous stage in workdir)")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--aggregation", choices=["tokens", "average", "concat"])
    p.add_argument("--resume", action="store_true")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate images from references and a prompt")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--refs", nargs="*", default=[])
    p.add_argument("--prompt", default="")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--num", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--aggregation", choices=["tokens", "average", "concat"])
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    common(p, manifest=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="held-out", choices=["held-in", "held-out"])
    p.add_argument("--out", required=True)
    p.add_argument("--probes")
    p.add_argument("--aggregation", choices=["tokens", "average", "concat"])
    p.add_argument("--max-cases", dest="max_cases", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--scale", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="comparison tables across checkpoints")
    common(p, manifest=True)
    p.add_argument("--kind", required=True, choices=["aggregation", "tokens", "scaling", "lora"])
    p.add_argument("--checkpoint", action="append", metavar="NAME=PATH")
    p.add_argument("--split", default="held-out", choices=["held-in", "held-out"])
    p.add_argument("--out", required=True)
    p.add_argument("--probes")
    p.add_argument("--sizes", type=int, nargs="*")
    p.add_argument("--max-cases", dest="max_cases", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--scale", type=float)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, KeyError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command line: pretrain, learn-residual, generate, evaluate, registry.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import pipeline
from .checkpoint import CheckpointError, state_checksum
from .config import RunConfig
from .diffusion import NumericalError
from .guidance import Layout, LayoutError, SamplerConfig, guided_sample
from .registry import Binding, BindingError, ChecksumError, RegistryError, ResidualRegistry
from .text import OutOfVocabularyError
from .toyworld import ShapeSpec, evaluate_run

log = logging.getLogger("toycompose")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
DEFAULT_REGISTRY = "registry"


class ValidationError(Exception):
    pass


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed_override", None) is not None:
        cfg.seed = args.seed_override
        cfg.pretrain.seed = args.seed_override
        cfg.residual.seed = args.seed_override
    return cfg


def _registry(args) -> ResidualRegistry:
    if getattr(args, "registry", None):
        return ResidualRegistry(args.registry)
    return ResidualRegistry.from_env(DEFAULT_REGISTRY)


def parse_subject(text: str) -> ShapeSpec:
    """``shape:color[:texture]`` -> ShapeSpec."""
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise ValidationError(f"subject must be shape:color[:texture], got {text!r}")
    return ShapeSpec(*parts)


# --------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    if args.steps is not None:
        cfg.pretrain.steps = args.steps
    out = Path(args.out)
    ckpt = out / "base.ckpt"
    if ckpt.exists() and not args.force:
        raise FileExistsError(f"{ckpt} exists (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    models = pipeline.pretrain(cfg)
    elapsed = time.perf_counter() - t0
    checksum = pipeline.save_models(ckpt, models)
    with open(out / "pretrain_loss.jsonl", "w") as f:
        for i, loss in enumerate(models.losses):
            f.write(json.dumps({"step": i, "loss": loss, "config": cfg.digest()}) + "\n")
    (out / "config.json").write_text(cfg.to_json())
    (out / "timing.json").write_text(json.dumps({"pretrain_seconds": elapsed, "steps": len(models.losses)}))
    print(f"wrote {ckpt} (checksum {checksum[:16]}, {len(models.losses)} steps, {elapsed:.0f}s)")
    return EXIT_OK


def cmd_learn_residual(args) -> int:
    models, manifest = pipeline.load_models(args.checkpoint)
    cfg = _load_config(args) if args.config else models.config
    if args.seed_override is not None:
        cfg.residual.seed = args.seed_override
    if args.steps is not None:
        cfg.residual.steps = args.steps
    spec = parse_subject(args.subject)
    reg = _registry(args)
    if args.name in reg and not args.overwrite:
        raise ValidationError(f"registry entry {args.name!r} exists (use --overwrite)")
    before = Path(args.checkpoint).read_bytes()
    run = pipeline.learn_residual(models, spec, args.name, cfg)
    if Path(args.checkpoint).read_bytes() != before:
        raise RuntimeError("base checkpoint changed during residual learning")
    path = reg.save(run.entry, overwrite=args.overwrite)
    if args.log:
        Path(args.log).parent.mkdir(parents=True, exist_ok=True)
        Path(args.log).write_text(run.history.to_jsonl())
    print(
        f"saved {args.name} -> {path} ({path.stat().st_size} bytes); "
        f"L_sub {run.sub_loss_before:.4f} -> {run.sub_loss_after:.4f}; |delta| {np.linalg.norm(run.entry.delta):.4f}"
    )
    return EXIT_OK


def _seeds(args) -> list[int]:
    seeds = list(args.seed or [0])
    if args.n_seeds:
        start = seeds[0]
        seeds = list(range(start, start + args.n_seeds))
    return seeds


def sampler_from_args(cfg: RunConfig, args) -> SamplerConfig:
    sc = SamplerConfig(**vars(cfg.sampler))
    for flag, attr in (
        ("steps", "steps"),
        ("scale", "guidance_scale"),
        ("gamma_plus", "gamma_plus"),
        ("gamma_minus", "gamma_minus"),
        ("guide_steps", "guide_steps"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(sc, attr, value)
    return sc


def cmd_generate(args) -> int:
    from PIL import Image

    models, manifest = pipeline.load_models(args.checkpoint)
    cfg = _load_config(args) if args.config else models.config
    if args.threads and args.threads > 1:
        if not args.allow_nondeterminism:
            raise ValidationError("--threads > 1 requires --allow-nondeterminism")
        torch.set_num_threads(args.threads)
    else:
        torch.set_num_threads(1)
    sc = sampler_from_args(cfg, args)
    reg = _registry(args)
    bindings = [Binding.parse(b, lambda n: reg.load(n, models.encoder.d_text)) for b in args.bind or []]
    layout = Layout.load(args.layout) if args.layout else None
    if layout is not None and layout.canvas != (cfg.model.image_size, cfg.model.image_size):
        raise ValidationError(f"layout canvas {layout.canvas} does not match the model resolution")
    seeds = _seeds(args)
    den_before, enc_before = state_checksum(models.denoiser), state_checksum(models.encoder)
    images, _ = guided_sample(
        models.denoiser,
        models.encoder,
        models.schedule,
        models.vocab,
        args.prompt,
        bindings,
        layout,
        sc,
        seeds,
        zero_masks=args.zero_masks,
    )
    den_after, enc_after = state_checksum(models.denoiser), state_checksum(models.encoder)
    if (den_before, enc_before) != (den_after, enc_after):
        raise RuntimeError("model parameters changed during generation")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for seed, img in zip(seeds, pipeline.to_uint8(images.numpy())):
        name = f"seed_{seed:05d}.png"
        Image.fromarray(img).save(out / name, format="PNG", optimize=False)
        records.append({"seed": seed, "file": name, "sha256": _sha256((out / name).read_bytes())})
    layout_json = layout.to_json() if layout else None
    man = {
        "config_hash": cfg.digest(),
        "checkpoint": str(args.checkpoint),
        "checkpoint_checksum": manifest["checksum"],
        "parameter_checksum_before": den_before[:16] + enc_before[:16],
        "parameter_checksum_after": den_after[:16] + enc_after[:16],
        "training_steps": 0,
        "prompt": args.prompt,
        "bindings": [
            {
                "word": b.word,
                "occurrence": b.occurrence,
                "entry": b.entry.name,
                "fingerprint": b.entry.fingerprint,
                "checksum": b.entry.checksum,
            }
            for b in bindings
        ],
        "layout": json.loads(layout_json) if layout_json else None,
        "layout_hash": _sha256(layout_json.encode())[:16] if layout_json else None,
        "sampler": vars(sc),
        "zero_masks": bool(args.zero_masks),
        "images": records,
    }
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True))
    print(f"wrote {len(records)} images to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from PIL import Image

    man_path = Path(args.manifest)
    man = json.loads(man_path.read_text())
    cfg = _load_config(args)
    if man["config_hash"] != cfg.digest() and not args.force:
        raise ValidationError(
            f"manifest config hash {man['config_hash']} != current config {cfg.digest()} (use --force)"
        )
    specs = json.loads(Path(args.specs).read_text())
    layout = Layout.from_json(json.dumps(man["layout"])) if man.get("layout") else None
    subjects = []
    for name, s in sorted(specs.items()):
        spec = ShapeSpec(s["base_category"], s["color"], s.get("texture", "solid"))
        boxes = layout.boxes_for(name) if layout else []
        subjects.append((name, spec, boxes[0] if boxes else None))
    images = []
    for rec in man["images"]:
        data = (man_path.parent / rec["file"]).read_bytes()
        if _sha256(data) != rec["sha256"]:
            raise ChecksumError(f"image {rec['file']} does not match its manifest hash")
        images.append(np.asarray(Image.open(man_path.parent / rec["file"]).convert("RGB")))
    imgs = pipeline.from_uint8(np.stack(images))
    report = evaluate_run(
        list(imgs),
        subjects,
        metadata={"config_hash": man["config_hash"], "seeds": [r["seed"] for r in man["images"]],
                  "manifest": str(man_path)},
    )
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_registry(args) -> int:
    reg = _registry(args)
    if args.action == "list":
        print(f"{'name':24} {'category':10} {'d_text':>6} {'bytes':>6}  fingerprint")
        for name in reg.names():
            e = reg.load(name)
            size = reg.path(name).stat().st_size
            print(f"{name:24} {e.base_category:10} {e.d_text:6d} {size:6d}  {json.dumps(e.fingerprint, sort_keys=True)}")
        return EXIT_OK
    if args.action == "inspect":
        if not args.name:
            raise ValidationError("inspect needs an entry name")
        e = reg.load(args.name)
        info = {
            "name": e.name,
            "base_category": e.base_category,
            "d_text": e.d_text,
            "size_bytes": reg.path(args.name).stat().st_size,
            "norm": float(np.linalg.norm(e.delta)),
            "crc32": f"{e.checksum:#010x}",
            "fingerprint": e.fingerprint,
        }
        print(json.dumps(info, indent=2, sort_keys=True))
        return EXIT_OK
    report = reg.verify()
    bad = 0
    for name, status in report.items():
        print(f"{name}: {status}")
        bad += status != "ok"
    return EXIT_IO if bad else EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="toycompose", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="run config JSON")
        if seed:
            sp.add_argument("--seed", dest="seed_override", type=int, default=None)

    sp = sub.add_parser("pretrain", help="train the base denoiser and text encoder")
    common(sp)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("learn-residual", help="learn and register one subject residual")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--subject", required=True, help="shape:color[:texture]")
    sp.add_argument("--name", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--registry")
    sp.add_argument("--log", help="write the loss curve as JSON lines")
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=cmd_learn_residual)

    sp = sub.add_parser("generate", help="sample images with bound residuals and a layout")
    sp.add_argument("--config")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--bind", action="append", help="word[@k]=entry (repeatable)")
    sp.add_argument("--layout")
    sp.add_argument("--seed", type=int, action="append")
    sp.add_argument("--n-seeds", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--scale", type=float)
    sp.add_argument("--guide-steps", type=int)
    sp.add_argument("--gamma-plus", type=float)
    sp.add_argument("--gamma-minus", type=float)
    sp.add_argument("--zero-masks", action="store_true", help="unguided baseline with the same bindings")
    sp.add_argument("--registry")
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--allow-nondeterminism", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate, seed_override=None)

    sp = sub.add_parser("evaluate", help="score generated images with the oracle")
    common(sp, seed=False)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--specs", required=True, help='JSON {name: {"base_category", "color", "texture"}}')
    sp.add_argument("--out")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_evaluate, seed_override=None)

    sp = sub.add_parser("registry", help="list, inspect or verify stored residuals")
    sp.add_argument("action", choices=["list", "inspect", "verify"])
    sp.add_argument("name", nargs="?")
    sp.add_argument("--registry")
    sp.set_defaults(func=cmd_registry)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ChecksumError, CheckpointError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ValueError, LayoutError, BindingError, RegistryError, OutOfVocabularyError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: gen, render, train, sample, verify.

Exit codes: 0 ok, 1 verification failed, 2 I/O error, 3 malformed input,
4 resume mismatch, 5 missing artifact.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import ConfigError, Manifest, RunConfig, load_config, scene_seeds
from .diffusion.model import ItemCondition, ModelSpec
from .diffusion.sample import SamplerConfig, sample
from .diffusion.train import (
    PHASES,
    Trainer,
    TrainConfig,
    build_model,
    load_checkpoint,
    make_example,
    model_records,
    parameter_digest,
    read_metrics,
    truncate_metrics,
)
from .fgm import scene_mask, write_mask_f32, write_mask_pgm
from .ors import render_ors, visualize, write_dors
from .scene.generator import generate_scene
from .scene.io import SceneFormatError, load_scene, save_scene, write_pgm, write_ppm
from .scene.raster import rasterize_reference, to_uint8

EXIT_OK, EXIT_FAILED, EXIT_IO, EXIT_MALFORMED, EXIT_RESUME, EXIT_MISSING = 0, 1, 2, 3, 4, 5
MANIFEST = "manifest.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def _write(fn, path, *args) -> Path:
    try:
        fn(path, *args)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc.strerror}") from exc
    return Path(path)


def _scene(path: str):
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING, f"scene file {p} not found")
    try:
        return load_scene(p)
    except SceneFormatError as exc:
        raise CliError(EXIT_MALFORMED, f"{p}: {exc}") from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {p}: {exc.strerror}") from exc


def _camera_index(scene, index: int) -> int:
    if not 0 <= index < len(scene.cameras):
        raise CliError(EXIT_MALFORMED, f"camera index {index} outside 0..{len(scene.cameras) - 1}")
    return index


def _pixels(image01: np.ndarray) -> np.ndarray:
    return to_uint8(image01)


# ----------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig, count: Optional[int] = None) -> int:
    count = cfg.dataset.count if count is None else count
    if count < 0:
        raise CliError(EXIT_MALFORMED, "--count must be >= 0")
    scenes_dir = cfg.paths.scenes_dir()
    try:
        scenes_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {scenes_dir}: {exc.strerror}") from exc
    seeds = scene_seeds(cfg.seed, count)
    files = []
    for i, s in enumerate(seeds):
        name = f"scene_{i:05d}.json"
        _write(save_scene, scenes_dir / name, generate_scene(s, cfg.generator))
        files.append(name)
    cfg = dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, count=count))
    manifest = Manifest(cfg.dataset.version, count, seeds, files, cfg.config_hash())
    _write(lambda p, m: m.write(p), scenes_dir / MANIFEST, manifest)
    print(f"wrote {count} scenes and {MANIFEST} to {scenes_dir}")
    return EXIT_OK


def cmd_render(cfg: RunConfig, scene_path: str, what: str, camera: int = 0) -> int:
    scene = _scene(scene_path)
    cam = _camera_index(scene, camera)
    out = _out_dir(cfg)
    stem = f"{Path(scene_path).stem}_cam{cam}"
    if what == "ors":
        feature = render_ors(scene, cam, cfg.sampling.plan_for(scene.grid))
        _write(write_dors, out / f"{stem}_ors.dors", feature)
        _write(write_pgm, out / f"{stem}_ors.pgm", visualize(feature))
        written = [f"{stem}_ors.dors", f"{stem}_ors.pgm"]
    elif what == "mask":
        mask = scene_mask(scene, cam)
        _write(write_mask_pgm, out / f"{stem}_mask.pgm", mask)
        _write(write_mask_f32, out / f"{stem}_mask.f32", mask)
        written = [f"{stem}_mask.pgm", f"{stem}_mask.f32"]
    elif what == "reference":
        _write(write_ppm, out / f"{stem}_reference.ppm", _pixels(rasterize_reference(scene, cam)))
        written = [f"{stem}_reference.ppm"]
    else:
        raise CliError(EXIT_MALFORMED, f"unknown artifact {what!r}")
    print("wrote " + " ".join(str(out / w) for w in written))
    return EXIT_OK


def _load_dataset(cfg: RunConfig):
    scenes_dir = cfg.paths.scenes_dir()
    mpath = scenes_dir / MANIFEST
    if not mpath.exists():
        raise CliError(EXIT_MISSING, f"dataset manifest {mpath} not found; run `gen` first")
    try:
        manifest = Manifest.read(mpath)
    except ConfigError as exc:
        raise CliError(EXIT_MALFORMED, str(exc)) from exc
    if manifest.count == 0:
        raise CliError(EXIT_MALFORMED, "dataset is empty")
    return manifest, [_scene(str(scenes_dir / f)) for f in manifest.files]


def cmd_train(cfg: RunConfig) -> int:
    tcfg = cfg.train
    _out_dir(cfg)
    manifest, scenes = _load_dataset(cfg)
    cfg = dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, count=manifest.count))
    config_hash = cfg.config_hash()
    if manifest.config_hash != config_hash:
        print(f"note: dataset was generated under config {manifest.config_hash[:12]}, training under {config_hash[:12]}")
    ck_path = cfg.paths.checkpoint_file()
    log_path = cfg.paths.metrics_log()

    prior = None
    records = None
    if ck_path.exists():
        try:
            records, prior = load_checkpoint(ck_path)
        except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_MALFORMED, f"unreadable checkpoint {ck_path}: {exc}") from exc
        if prior.config_hash != config_hash:
            raise CliError(EXIT_RESUME, f"checkpoint config hash {prior.config_hash[:12]} does not match this config ({config_hash[:12]})")
        if ModelSpec.from_dict(prior.model) != cfg.model:
            raise CliError(EXIT_RESUME, "checkpoint model spec differs from the configured model")

    examples = []
    for scene in scenes:
        plan = cfg.sampling.plan_for(scene.grid)
        examples.extend(make_example(scene, c, plan) for c in range(len(scene.cameras)))
    model = build_model(cfg.model, cfg.seed)
    trainer = Trainer(model, examples, tcfg, config_hash)
    if prior is not None and prior.phase == tcfg.phase:
        trainer.restore(records, prior)
        print(f"resuming {tcfg.phase} at step {prior.step}")
    else:
        if prior is not None:
            model.load_state_dict(model_records(records))
            print(f"starting {tcfg.phase} from the {prior.phase} checkpoint")
        trainer.start_phase(prior)
    truncate_metrics(log_path, tcfg.phase, trainer.step)

    base_before = parameter_digest(model.base_parameters())
    try:
        trainer.run(log_path=log_path, checkpoint_path=ck_path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"training I/O failed: {exc}") from exc
    base_after = parameter_digest(model.base_parameters())

    from .plotting import loss_curve

    curve = loss_curve(read_metrics(log_path), log_path.with_name("loss_curve.png"))
    print(f"phase {tcfg.phase}: step {trainer.step}/{tcfg.steps}; checkpoint {ck_path}; log {log_path}; curve {curve}")
    print(f"base digest {base_before[:16]} -> {base_after[:16]}")
    return EXIT_OK


def _load_model(cfg: RunConfig):
    ck_path = cfg.paths.checkpoint_file()
    if not ck_path.exists():
        raise CliError(EXIT_MISSING, f"checkpoint {ck_path} not found; run `train` first")
    try:
        records, state = load_checkpoint(ck_path)
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_MALFORMED, f"unreadable checkpoint {ck_path}: {exc}") from exc
    spec = ModelSpec.from_dict(state.model)
    model = build_model(spec, 0)
    model.load_state_dict(model_records(records))
    return model


def cmd_sample(cfg: RunConfig, scene_path: str, camera: int = 0, sampler: Optional[SamplerConfig] = None) -> int:
    model = _load_model(cfg)
    scene = _scene(scene_path)
    cam = _camera_index(scene, camera)
    out = _out_dir(cfg)
    sampler = sampler or cfg.sampler
    plan = dataclasses.replace(cfg.sampling, n=model.spec.ors_samples).plan_for(scene.grid)
    item = ItemCondition.from_scene(scene, cam, plan)
    image = sample(model, [item], sampler, seed=cfg.seed)[0]
    image01 = (image.transpose(1, 2, 0) + 1.0) / 2.0
    reference = rasterize_reference(scene, cam)
    mae = float(np.mean(np.abs(image01 - reference)))
    stem = f"{Path(scene_path).stem}_cam{cam}"
    _write(write_ppm, out / f"{stem}_sample.ppm", _pixels(image01))

    from .plotting import sample_grid

    sample_grid([{"reference": reference, "sample": image01}], out / f"{stem}_compare.png")
    print(f"wrote {out / (stem + '_sample.ppm')}; mae {mae:.6f}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, names: Optional[List[str]] = None) -> int:
    from .plotting import verify_report
    from .verify import REGISTRY, Fixtures, format_report, run_checks

    unknown = sorted(set(names or []) - set(REGISTRY))
    if unknown:
        raise CliError(EXIT_MALFORMED, f"unknown checks {unknown}; available: {sorted(REGISTRY)}")
    out = _out_dir(cfg)
    results = run_checks(cfg.verify, Fixtures(seed=cfg.seed), names)
    report = format_report(results)
    sys.stdout.write(report)
    _write(lambda p, s: Path(p).write_text(s), out / "verify_report.txt", report)
    verify_report(results, out / "verify_report.png")
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAILED


# ----------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualbranch", description="Occupancy-conditioned street-scene diffusion toolkit.")
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="global seed (overrides the config)")
    parser.add_argument("--out", help="output directory (overrides paths.out)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scene dataset")
    p.add_argument("--count", type=int)

    p = sub.add_parser("render", help="render ORS, FGM mask or reference image for one scene camera")
    p.add_argument("scene")
    p.add_argument("--what", choices=("ors", "mask", "reference"), default="reference")
    p.add_argument("--camera", type=int, default=0)

    p = sub.add_parser("train", help="run or resume one training phase")
    p.add_argument("--phase", choices=PHASES)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint-every", type=int)

    p = sub.add_parser("sample", help="sample an image for one scene camera")
    p.add_argument("scene")
    p.add_argument("--camera", type=int, default=0)
    p.add_argument("--guidance", type=float)
    p.add_argument("--sampler", choices=("ddim", "ddpm"))
    p.add_argument("--sampler-steps", type=int)
    p.add_argument("--eta", type=float)

    p = sub.add_parser("verify", help="run the verification checks")
    p.add_argument("--check", action="append", dest="checks", help="run only this check (repeatable)")
    return parser


def _resolve_config(args) -> RunConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(EXIT_MISSING, f"config {path} not found")
        try:
            cfg = load_config(path)
        except ConfigError as exc:
            raise CliError(EXIT_MALFORMED, f"{path}: {exc}") from exc
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read {path}: {exc.strerror}") from exc
    else:
        cfg = RunConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise CliError(EXIT_MALFORMED, "--seed must lie in [0, 2^64)")
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, paths=dataclasses.replace(cfg.paths, out=args.out))
    if args.command == "train":
        overrides = {k: v for k, v in (("phase", args.phase), ("steps", args.steps), ("lr", args.lr),
                                        ("batch_size", args.batch_size), ("checkpoint_every", args.checkpoint_every)) if v is not None}
        try:
            cfg = dataclasses.replace(cfg, train=TrainConfig(**{**cfg.train.to_dict(), **overrides}))
        except ValueError as exc:
            raise CliError(EXIT_MALFORMED, str(exc)) from exc
    return cfg


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "gen":
            return cmd_gen(cfg, args.count)
        if args.command == "render":
            return cmd_render(cfg, args.scene, args.what, args.camera)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "sample":
            overrides = {k: v for k, v in (("guidance", args.guidance), ("kind", args.sampler),
                                            ("steps", args.sampler_steps), ("eta", args.eta)) if v is not None}
            try:
                sampler = dataclasses.replace(cfg.sampler, **overrides)
            except ValueError as exc:
                raise CliError(EXIT_MALFORMED, str(exc)) from exc
            return cmd_sample(cfg, args.scene, args.camera, sampler)
        if args.command == "verify":
            return cmd_verify(cfg, args.checks)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_MALFORMED


if __name__ == "__main__":
    sys.exit(main())

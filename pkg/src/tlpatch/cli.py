"""Command-line entry point: ``tlpatch <command> [options]``.

Settings resolve in three layers: the named profile, then a flat YAML config
file (``--config``), then command-line flags (``--set key=value`` for any
schema key). Each run writes the resolved settings to ``config.yaml`` in the
output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import torch
import yaml
from PIL import Image, ImageDraw

from . import data_io, synthetic
from .core import (AttackConfig, ConfigError, DataError, EotRanges, NothingToAttack, NumericFailure,
                   TLPatchError, profile_config)
from .detector import make_adapter
from .evaluator import evaluate, patched_image
from .trainer import train

log = logging.getLogger("tlpatch")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _pair(v) -> tuple[float, float]:
    if isinstance(v, str):
        v = [s for s in v.replace(",", " ").split() if s]
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise ValueError("expected two numbers")
    return float(v[0]), float(v[1])


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes", "on"):
        return True
    if str(v).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_int(v):
    return None if v is None or str(v).lower() in ("none", "null", "") else int(v)


def _opt_str(v):
    return None if v is None or str(v).lower() in ("none", "null", "") else str(v)


def _mapping(v) -> dict[str, str]:
    if isinstance(v, dict):
        return {str(k): str(t) for k, t in v.items()}
    pairs = {}
    for item in str(v).split(","):
        src, sep, dst = item.partition(":")
        if not sep or not src.strip() or not dst.strip():
            raise ValueError(f"bad mapping entry {item!r}; use source:target")
        pairs[src.strip()] = dst.strip()
    return pairs


# key -> (parser, default). Attack keys default to None so the profile decides.
SCHEMA: dict[str, tuple[Callable[[Any], Any], Any]] = {
    "profile": (str, "digital"),
    "seed": (int, 0),
    "out_dir": (str, "runs/latest"),
    "dataset": (_opt_str, None),
    "patch": (_opt_str, None),
    "class_map": (str, "synthetic"),
    "mapping": (_mapping, {"red": "green"}),
    "detector": (str, "context_blob"),
    "init_side": (int, 50),
    "init_mode": (str, "gray"),
    "opacity": (float, 1.0),
    "overlays": (_bool, False),
    "n": (int, 100),
    "scene": (str, "benchmark"),
    "light_width_m": (float, 0.30),
    "scale_factor": (float, 2.0),
    "dpi": (int, 150),
    "alpha": (float, None),
    "beta": (float, None),
    "gamma": (float, None),
    "delta": (float, None),
    "pgd_steps": (int, None),
    "learning_rate": (float, None),
    "scale_range": (_pair, None),
    "suppress_channel": (str, None),
    "suppress_mode": (str, None),
    "step_rule": (str, None),
    "reset_moments_per_box": (_bool, None),
    "epochs": (int, None),
    "max_updates": (_opt_int, None),
    "eval_scale": (float, None),
    "eot_enabled": (_bool, None),
    "eot_rot_xy_deg": (_pair, None),
    "eot_rot_z_deg": (_pair, None),
    "eot_brightness": (_pair, None),
    "eot_translate_pad_px": (float, None),
}

_ATTACK_KEYS = {f.name for f in dataclasses.fields(AttackConfig)} - {"eot"}
SCENES = {"benchmark": synthetic.BENCHMARK_SCENES, "default": synthetic.SceneConfig()}


def _normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def validate_settings(raw: dict, source: str) -> dict:
    out = {}
    for key, value in raw.items():
        k = _normalize_key(str(key))
        if k not in SCHEMA:
            raise ConfigError(f"{source}: unknown key {key!r}")
        if isinstance(value, dict) and k != "mapping":
            raise ConfigError(f"{source}: key {key!r} must be a flat value")
        try:
            out[k] = SCHEMA[k][0](value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from None
    return out


def load_config_file(path: str | Path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"--config: cannot read {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"--config: {path} is not valid YAML: {exc}") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"--config: {path} must hold key: value pairs")
    return validate_settings(raw, str(path))


def resolve(args: argparse.Namespace) -> dict:
    settings = {k: default for k, (_, default) in SCHEMA.items()}
    if args.config:
        settings.update(load_config_file(args.config))
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key] = yaml.safe_load(value) if value else None
    for flag in ("profile", "seed", "out_dir", "dataset", "patch", "class_map", "mapping", "detector",
                 "n", "scene", "light_width_m", "scale_factor", "dpi", "opacity"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    settings.update(validate_settings(overrides, "command line"))
    return settings


def attack_config(settings: dict) -> AttackConfig:
    overrides = {k: settings[k] for k in _ATTACK_KEYS if settings.get(k) is not None}
    overrides["seed"] = settings["seed"]
    cfg = profile_config(settings["profile"], **overrides)
    eot = {k[4:]: settings[k] for k in SCHEMA if k.startswith("eot_") and settings[k] is not None}
    if eot:
        cfg = dataclasses.replace(cfg, eot=dataclasses.replace(cfg.eot, **eot))
    return cfg


def fill_attack_keys(settings: dict) -> dict:
    """Replace unset attack keys with the values the profile resolves to."""
    cfg = attack_config(settings)
    out = dict(settings)
    for k in _ATTACK_KEYS:
        out[k] = getattr(cfg, k)
    for f in dataclasses.fields(EotRanges):
        out["eot_" + f.name] = getattr(cfg.eot, f.name)
    return out


def echo_config(settings: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    plain = {k: list(v) if isinstance(v, tuple) else v for k, v in settings.items()}
    (out_dir / "config.yaml").write_text(yaml.safe_dump(plain, sort_keys=True), encoding="utf-8")


def _class_map(settings: dict) -> data_io.ClassMap:
    if settings["class_map"] == "synthetic":
        return data_io.SYNTHETIC_CLASSES
    path = Path(settings["class_map"])
    if not path.is_file():
        raise ConfigError(f"--class-map: {path} not found")
    return data_io.load_class_map(path)


def _dataset(settings: dict, class_map: data_io.ClassMap):
    if not settings["dataset"]:
        raise ConfigError("--dataset is required")
    root = Path(settings["dataset"])
    if not root.is_dir():
        raise DataError(f"--dataset: {root} is not a directory")
    return data_io.load_dataset(root, class_map)


def _require_patch(settings: dict) -> data_io.PatchBundle:
    if not settings["patch"]:
        raise ConfigError("--patch is required")
    return data_io.load_patch(settings["patch"])


def _adapter(settings: dict):
    return make_adapter(settings["detector"])


def cmd_train(settings: dict, out_dir: Path) -> int:
    class_map = _class_map(settings)
    mapping = class_map.mapping(settings["mapping"])
    dataset = _dataset(settings, class_map)
    cfg = attack_config(settings)
    result = train(dataset, _adapter(settings), mapping, cfg, init_side=settings["init_side"],
                   init_mode=settings["init_mode"], log_path=out_dir / "train_log.ndjson")
    bundle = data_io.PatchBundle(result.patch, class_map.name, mapping, cfg,
                                 training_set=str(Path(settings["dataset"]).resolve()))
    data_io.save_patch(bundle, out_dir / "patch")
    print(f"trained {len(result.loss_history)} steps; patch written to {out_dir / 'patch'}")
    return EXIT_OK


def _draw_overlay(image: torch.Tensor, detections, class_map: data_io.ClassMap, path: Path) -> None:
    data_io.write_image(path, image)
    with Image.open(path) as im:
        im = im.convert("RGB")
        draw = ImageDraw.Draw(im)
        for d in detections:
            color = (0, 255, 0) if "green" in class_map.entries.get(d.class_id, "") else (255, 0, 0)
            draw.rectangle(d.box.as_tuple(), outline=color)
            draw.text((d.box.x_min, max(0, d.box.y_min - 10)),
                      f"{class_map.entries.get(d.class_id, d.class_id)} {d.confidence:.2f}", fill=color)
        im.save(path)


def cmd_evaluate(settings: dict, out_dir: Path) -> int:
    class_map = _class_map(settings)
    dataset = _dataset(settings, class_map)
    bundle = data_io.load_patch(settings["patch"]) if settings["patch"] else None
    mapping = bundle.mapping if bundle else class_map.mapping(settings["mapping"])
    cfg = attack_config(settings)
    runs: list = []
    report = evaluate(dataset, _adapter(settings), bundle.patch if bundle else None, mapping, cfg,
                      opacity=settings["opacity"], keep_detections=runs)
    report.save(out_dir / "report.json")
    if settings["overlays"]:
        overlay_dir = out_dir / "overlays"
        overlay_dir.mkdir(exist_ok=True)
        for sample, dets in runs:
            image = sample.image if bundle is None else patched_image(
                sample, bundle.patch, mapping, cfg.eval_scale, settings["opacity"])
            _draw_overlay(image.detach(), dets, class_map, overlay_dir / f"{sample.image_id}.png")
    print(f"targets={report.n_targets} flip={report.flip_rate:.3f} vanish={report.vanish_rate:.3f} "
          f"correct={report.correct_rate:.3f} fabrication={report.fabrication_rate:.3f}")
    return EXIT_OK


def cmd_apply(settings: dict, out_dir: Path) -> int:
    class_map = _class_map(settings)
    dataset = _dataset(settings, class_map)
    bundle = _require_patch(settings)
    cfg = attack_config(settings)
    target = out_dir / "applied"
    data_io.save_dataset(
        [dataclasses.replace(s, image=patched_image(s, bundle.patch, bundle.mapping, cfg.eval_scale,
                                                    settings["opacity"]).detach())
         for s in dataset],
        target)
    print(f"wrote {len(dataset)} composited images to {target}")
    return EXIT_OK


def cmd_export_print(settings: dict, out_dir: Path) -> int:
    bundle = _require_patch(settings)
    art = data_io.export_print(bundle.patch, settings["light_width_m"], settings["scale_factor"],
                               settings["dpi"], out_dir)
    print(f"{art.path} ({art.side_cm:g} x {art.side_cm:g} cm, {art.side_px} px at {art.dpi} dpi)")
    return EXIT_OK


def cmd_render_synthetic(settings: dict, out_dir: Path) -> int:
    try:
        scene = SCENES[settings["scene"]]
    except KeyError:
        raise ConfigError(f"--scene must be one of {sorted(SCENES)}") from None
    scenes = synthetic.render_synthetic(settings["n"], scene, settings["seed"])
    data_io.save_dataset(scenes, out_dir)
    print(f"rendered {len(scenes)} scenes to {out_dir}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "apply": cmd_apply,
    "export-print": cmd_export_print,
    "render-synthetic": cmd_render_synthetic,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML file of key: value settings")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--profile", choices=sorted(("digital", "physical")))
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tlpatch", description="Adversarial patch attacks on traffic-light detectors.")
    sub = parser.add_subparsers(dest="command", required=True)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", help="directory with images/ and labels/")
    data.add_argument("--class-map", dest="class_map", help="'synthetic' or a file with one class name per line")
    data.add_argument("--detector")

    p = sub.add_parser("train", parents=[common, data], help="optimize a universal patch")
    p.add_argument("--mapping", help="source:target class pairs, e.g. red:green")

    p = sub.add_parser("evaluate", parents=[common, data], help="score a patch (or the clean baseline)")
    p.add_argument("--patch", help="patch bundle directory; omit for the clean baseline")
    p.add_argument("--mapping")
    p.add_argument("--opacity", type=float)
    p.add_argument("--overlays", action="store_const", const="true", dest="overlays_flag")

    p = sub.add_parser("apply", parents=[common, data], help="write composited images")
    p.add_argument("--patch")
    p.add_argument("--opacity", type=float)

    p = sub.add_parser("export-print", parents=[common], help="rasterize a patch for printing")
    p.add_argument("--patch")
    p.add_argument("--light-width-m", dest="light_width_m", type=float)
    p.add_argument("--scale-factor", dest="scale_factor", type=float)
    p.add_argument("--dpi", type=int)

    p = sub.add_parser("render-synthetic", parents=[common], help="write a synthetic dataset")
    p.add_argument("--n", type=int)
    p.add_argument("--scene", choices=sorted(SCENES))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = fill_attack_keys(resolve(args))
        if getattr(args, "overlays_flag", None):
            settings["overlays"] = True
        out_dir = Path(settings["out_dir"])
        echo_config(settings, out_dir)
        torch.manual_seed(settings["seed"])
        return COMMANDS[args.command](settings, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, NothingToAttack) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TLPatchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: crop-plan, cos, eval, sweep, synth, shortcut.

Every output JSON embeds the resolved run config (keys match the flag dest
names, so an output's ``config`` block is itself a valid ``--config`` file)
plus the tool version, and re-running a command with the same flags
reproduces the file byte for byte. Exit codes: 0 success, 1 I/O error,
2 validation/data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__, cos, fsl, synth
from .crops import DEFAULT_ASPECT, DEFAULT_MIN_AREA, CropPlan
from .errors import CosocError, SchemaError
from .features import load_store, save_store

EXIT_OK = 0
EXIT_IO = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

_SWEEP_PARAMS = ("alpha", "beta", "gamma", "H")


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path: str | Path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < --config file < explicit flags (argparse leaves unset flags None)."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _read_json(args.config)
        if not isinstance(file_cfg, dict):
            raise SchemaError("--config file must hold a JSON object")
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise SchemaError(f"--config has unknown keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    env_seed = os.environ.get("COSOC_SEED")
    if env_seed is not None and "seed" in merged:
        merged["seed"] = int(env_seed)
    return merged


def _world_defaults() -> dict:
    base = synth.WorldConfig()
    return {
        "classes": base.classes,
        "images_per_class": base.images_per_class,
        "crops_per_image": base.crops_per_image,
        "dim": base.dim,
        "embed_dim": base.embed_dim,
        "fg_dims": None,  # --config only; resolved to the first half of dims
        "bg_dims": None,
        "rho_train": base.rho_train,
        "rho_eval": base.rho_eval,
        "noise_sigma": base.noise_sigma,
        "fg_crop_fraction": base.fg_crop_fraction,
        "bg_scale": base.bg_scale,
        "seed": base.seed,
    }


def _add_world_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--classes", type=int)
    sub.add_argument("--images-per-class", type=int, dest="images_per_class")
    sub.add_argument("--crops-per-image", type=int, dest="crops_per_image")
    sub.add_argument("--dim", type=int)
    sub.add_argument("--embed-dim", type=int, dest="embed_dim")
    sub.add_argument("--rho-train", type=float, dest="rho_train")
    sub.add_argument("--rho-eval", type=float, dest="rho_eval")
    sub.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    sub.add_argument("--fg-crop-fraction", type=float, dest="fg_crop_fraction")
    sub.add_argument("--bg-scale", type=float, dest="bg_scale")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--config", help="JSON file of flag values (flags win)")


def _world_from(cfg: dict) -> synth.WorldConfig:
    return synth.WorldConfig(
        classes=cfg["classes"],
        images_per_class=cfg["images_per_class"],
        crops_per_image=cfg["crops_per_image"],
        dim=cfg["dim"],
        embed_dim=cfg["embed_dim"],
        fg_dims=tuple(cfg["fg_dims"]) if cfg.get("fg_dims") is not None else None,
        bg_dims=tuple(cfg["bg_dims"]) if cfg.get("bg_dims") is not None else None,
        rho_train=cfg["rho_train"],
        rho_eval=cfg["rho_eval"],
        noise_sigma=cfg["noise_sigma"],
        fg_crop_fraction=cfg["fg_crop_fraction"],
        bg_scale=cfg["bg_scale"],
        seed=cfg["seed"],
    )


# --- subcommands ------------------------------------------------------------


def _cmd_crop_plan(args: argparse.Namespace) -> int:
    defaults = {
        "images": None,
        "l": 30,
        "seed": 0,
        "min_area": DEFAULT_MIN_AREA,
        "aspect": list(DEFAULT_ASPECT),
        "out": "plan.json",
    }
    cfg = _merge_config(args, defaults)
    if not cfg["images"]:
        raise SchemaError("--images manifest is required")
    manifest = _read_json(cfg["images"])
    image_ids = manifest["images"] if isinstance(manifest, dict) else manifest
    if not isinstance(image_ids, list) or not all(isinstance(i, str) for i in image_ids):
        raise SchemaError("images manifest must list image id strings")
    plan = CropPlan.generate(
        image_ids,
        count=cfg["l"],
        seed=cfg["seed"],
        min_area_ratio=cfg["min_area"],
        aspect_range=(cfg["aspect"][0], cfg["aspect"][1]),
    )
    payload = plan.to_json()
    payload["config"] = cfg
    payload["version"] = __version__
    _write_json(cfg["out"], payload)
    return EXIT_OK


def _cmd_cos(args: argparse.Namespace) -> int:
    defaults = {
        "store": None,
        "gamma": cos.DEFAULT_GAMMA,
        "clusters": cos.DEFAULT_CLUSTERS,
        "topk": cos.DEFAULT_TOP_K,
        "seed": 0,
        "out": "foreground.json",
    }
    cfg = _merge_config(args, defaults)
    if not cfg["store"]:
        raise SchemaError("--store directory is required")
    store = load_store(cfg["store"])
    table = cos.score_store(
        store,
        gamma=cfg["gamma"],
        n_clusters=cfg["clusters"],
        top_k=cfg["topk"],
        seed=cfg["seed"],
    )
    payload = table.to_json()
    payload["config"] = cfg
    payload["version"] = __version__
    _write_json(cfg["out"], payload)
    return EXIT_OK


def _eval_defaults() -> dict:
    return {
        "store": None,
        "classifier": "cc",
        "n": fsl.DEFAULT_N_WAY,
        "k": fsl.DEFAULT_K_SHOT,
        "m": fsl.DEFAULT_M_QUERY,
        "tasks": fsl.DEFAULT_TASKS,
        "repeats": fsl.DEFAULT_REPEATS,
        "alpha": fsl.DEFAULT_ALPHA,
        "beta": fsl.DEFAULT_BETA,
        "gamma": cos.DEFAULT_GAMMA,  # echoed for provenance; consumed by `cos`
        "clusters": cos.DEFAULT_CLUSTERS,
        "crops": fsl.DEFAULT_CROPS,
        "variant": "ori",
        "ground_truth": None,
        "trace": None,
        "seed": 0,
        "out": "report.json",
    }


def _run_eval(cfg: dict, workers: int | None) -> dict:
    store = load_store(cfg["store"])
    roles = synth.load_ground_truth(cfg["ground_truth"]) if cfg["ground_truth"] else None
    report = fsl.run_benchmark(
        store,
        cfg["classifier"],
        n_way=cfg["n"],
        k_shot=cfg["k"],
        m_query=cfg["m"],
        tasks=cfg["tasks"],
        repeats=cfg["repeats"],
        seed=cfg["seed"],
        alpha=cfg["alpha"],
        beta=cfg["beta"],
        n_crops=cfg["crops"],
        variant=cfg["variant"],
        roles=roles,
        workers=workers,
        config_extra={"gamma": cfg["gamma"], "H": cfg["clusters"], "store": cfg["store"],
                      "ground_truth": cfg["ground_truth"], "out": cfg["out"]},
    )
    payload = report.to_json()
    payload["version"] = __version__
    return payload


def _cmd_eval(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, _eval_defaults())
    if not cfg["store"]:
        raise SchemaError("--store directory is required")
    payload = _run_eval(cfg, args.workers)
    _write_json(cfg["out"], payload)
    if cfg["trace"]:
        if cfg["classifier"] != "soc":
            raise SchemaError("--trace requires --classifier soc")
        store = load_store(cfg["store"])
        roles = synth.load_ground_truth(cfg["ground_truth"]) if cfg["ground_truth"] else None
        traces = fsl.soc_episode_traces(
            store,
            n_way=cfg["n"],
            k_shot=cfg["k"],
            m_query=cfg["m"],
            seed=cfg["seed"],
            alpha=cfg["alpha"],
            beta=cfg["beta"],
            n_crops=cfg["crops"],
            variant=cfg["variant"],
            roles=roles,
        )
        _write_json(cfg["trace"], {"traces": traces, "config": cfg, "version": __version__})
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    defaults = _eval_defaults()
    defaults.update({"param": None, "values": None, "out": "sweep.json"})
    cfg = _merge_config(args, defaults)
    if not cfg["store"]:
        raise SchemaError("--store directory is required")
    if cfg["param"] not in _SWEEP_PARAMS:
        raise SchemaError(f"--param must be one of {_SWEEP_PARAMS}")
    if not cfg["values"]:
        raise SchemaError("--values must be non-empty")

    key = {"alpha": "alpha", "beta": "beta", "gamma": "gamma", "H": "clusters"}[cfg["param"]]
    reports, summary, errors = [], [], []
    for value in cfg["values"]:
        point = dict(cfg)
        point[key] = int(value) if cfg["param"] == "H" else float(value)
        try:
            payload = _run_eval(point, args.workers)
            reports.append({"value": value, "report": payload})
            summary.append({"value": value, "mean": payload["mean"], "ci95": payload["ci95"]})
        except CosocError as exc:  # keep partial results
            errors.append({"value": value, "error": str(exc)})
    out = {
        "param": cfg["param"],
        "values": cfg["values"],
        "summary": summary,
        "reports": reports,
        "errors": errors,
        "config": cfg,
        "version": __version__,
    }
    _write_json(cfg["out"], out)
    return EXIT_OK if not errors else EXIT_DATA


def _cmd_synth(args: argparse.Namespace) -> int:
    defaults = _world_defaults()
    defaults.update({"preset": None, "split": "train", "out": "synth-store"})
    cfg = _merge_config(args, defaults)
    if cfg["preset"] not in (None, "shortcut"):
        raise SchemaError(f"unknown preset {cfg['preset']!r}")
    # the shortcut preset is exactly the default world
    world_cfg = _world_from(cfg)
    world = synth.generate_world(world_cfg, split=cfg["split"])
    out_dir = Path(cfg["out"])
    save_store(world.store, out_dir)
    synth.save_ground_truth(world, out_dir / "ground_truth.json")
    echo = world_cfg.to_json()
    echo["split"] = cfg["split"]
    _write_json(str(out_dir / "synth.json"), {"config": echo, "version": __version__})
    return EXIT_OK


def _cmd_shortcut(args: argparse.Namespace) -> int:
    defaults = _world_defaults()
    defaults.update(
        {
            "seeds": 10,
            "episodes": 500,
            "n": 5,
            "k": fsl.DEFAULT_K_SHOT,
            "m": fsl.DEFAULT_M_QUERY,
            "alpha": fsl.DEFAULT_ALPHA,
            "beta": fsl.DEFAULT_BETA,
            "crops": fsl.DEFAULT_CROPS,
            "epochs": 20,
            "lr": 0.5,
            "out": "table.json",
        }
    )
    cfg = _merge_config(args, defaults)
    world_cfg = _world_from(cfg)
    table = synth.shortcut_experiment(
        world_cfg,
        seeds=cfg["seeds"],
        episodes=cfg["episodes"],
        n_way=cfg["n"],
        k_shot=cfg["k"],
        m_query=cfg["m"],
        alpha=cfg["alpha"],
        beta=cfg["beta"],
        n_crops=cfg["crops"],
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        workers=args.workers,
    )
    table["cli_config"] = cfg
    table["version"] = __version__
    _write_json(cfg["out"], table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cosoc",
        description="Foreground scoring, shared-object matching, and few-shot benchmarks "
        "over crop-embedding stores.",
    )
    parser.add_argument("--version", action="version", version=f"cosoc {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("crop-plan", help="sample seeded crop rects for listed images")
    p.add_argument("--images", help="JSON manifest listing image ids")
    p.add_argument("--l", type=int, help="crops per image")
    p.add_argument("--seed", type=int)
    p.add_argument("--min-area", type=float, dest="min_area")
    p.add_argument("--aspect", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_crop_plan)

    p = subs.add_parser("cos", help="cluster, prune, and score foreground per class")
    p.add_argument("--store", help="feature store directory")
    p.add_argument("--gamma", type=float)
    p.add_argument("--clusters", type=int, help="number of k-means clusters")
    p.add_argument("--topk", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_cos)

    p = subs.add_parser("eval", help="episodic few-shot benchmark")
    p.add_argument("--store")
    p.add_argument("--classifier", choices=fsl.CLASSIFIERS)
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--tasks", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float, help="echoed into the report config")
    p.add_argument("--clusters", type=int, help="echoed into the report config")
    p.add_argument("--crops", type=int)
    p.add_argument("--variant", choices=("ori", "fg"))
    p.add_argument("--ground-truth", dest="ground_truth", help="roles JSON for fg variant")
    p.add_argument("--trace", help="write first-episode match traces (soc only)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=fsl.default_workers())
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_eval)

    p = subs.add_parser("sweep", help="run eval over a grid of one hyperparameter")
    p.add_argument("--param", choices=_SWEEP_PARAMS)
    p.add_argument("--values", type=float, nargs="+")
    p.add_argument("--store")
    p.add_argument("--classifier", choices=fsl.CLASSIFIERS)
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--tasks", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--clusters", type=int)
    p.add_argument("--crops", type=int)
    p.add_argument("--variant", choices=("ori", "fg"))
    p.add_argument("--ground-truth", dest="ground_truth")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=fsl.default_workers())
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_sweep)

    p = subs.add_parser("synth", help="generate a synthetic crop-embedding store")
    p.add_argument("--preset", help="named preset (shortcut = default world)")
    p.add_argument("--split", choices=("train", "eval"))
    _add_world_flags(p)
    p.add_argument("--out", help="output store directory")
    p.set_defaults(func=_cmd_synth)

    p = subs.add_parser("shortcut", help="train ori/fg/fuse embeddings and compare")
    p.add_argument("--seeds", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--crops", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    _add_world_flags(p)
    p.add_argument("--workers", type=int, default=fsl.default_workers())
    p.add_argument("--out")
    p.set_defaults(func=_cmd_shortcut)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CosocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

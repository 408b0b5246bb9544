"""``flatgrasp`` command line: train, eval, ablate, decode, gen-objects, render.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import jsonschema

from . import checkpoint as ckpt_io
from .config import ConfigError, RunConfig, load_config
from .decoder import MAP_SIZE, PLAN_SCHEMA, decode
from .env import read_records, scene_from_record
from .evaluation import DEFAULT_RUNS, ManifestError, checkpoint_id, dump_manifest, evaluate_agent, load_manifest, make_manifest
from .geometry import FAMILY_GROUPS, Pose2D, Scene, generate_object, rasterize
from .policy import greedy_action
from .ppo import NumericalError
from .render import ImageError, load_depth, load_mask, overlay, save_observation
from .train import train

log = logging.getLogger("flatgrasp")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

ABLATION_VARIANTS = (
    ("Fixed Backbone", "Shared AC", "fixed", "shared"),
    ("Fixed Backbone", "Independent AC", "fixed", "independent"),
    ("Adaptive Backbone", "Shared AC", "adaptive", "shared"),
    ("Adaptive Backbone", "Independent AC", "adaptive", "independent"),
)


class UsageError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _progress(row):
    log.info("episode %d  trailing success %.3f", row["episode"], row["success_trailing"])


def _start_run(config: RunConfig, raw: str, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(raw)
    (out / "config.resolved.json").write_text(json.dumps(config.model_dump(mode="json"), indent=1, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    config, raw = load_config(args.config, seed=args.seed)
    if args.out:
        config = config.model_copy(update={"out_dir": args.out})
    out = Path(config.out_dir)
    _start_run(config, raw, out)
    result = train(config, out, resume=args.resume, workers=args.workers, progress=_progress)
    print(json.dumps({"episodes": result.episodes, "checkpoint": str(result.final_checkpoint), "success_trailing": result.success_trailing}))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.runs < 1:
        raise UsageError("--runs must be >= 1")
    ck = ckpt_io.load(args.checkpoint)
    try:
        config = RunConfig.model_validate(ck.config)
    except ValueError as exc:
        raise ConfigError(f"checkpoint carries an invalid config: {exc}") from exc
    agent = ckpt_io.build_agent(ck)
    manifest = load_manifest(args.objects)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_agent(
        agent,
        manifest["objects"],
        runs=args.runs,
        seed=args.seed,
        env_config=config.env_config(evaluation=True),
        workers=args.workers,
        records_path=out / "episodes.jsonl",
        config_hash=config.config_hash(),
        ckpt_id=checkpoint_id(args.checkpoint),
    )
    (out / "report.json").write_text(report.to_json())
    table = report.table()
    (out / "report.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def _slug(backbone: str, ac: str) -> str:
    return f"{backbone}-{ac}".lower().replace(" ", "_")


def cmd_ablate(args) -> int:
    base, raw = load_config(args.config, seed=args.seed)
    root = Path(args.out or base.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(raw)
    summary = []
    for bb_label, ac_label, mode, ac_mode in ABLATION_VARIANTS:
        variant_dir = root / _slug(bb_label, ac_label)
        config = base.model_copy(
            update={
                "out_dir": str(variant_dir),
                "backbone": base.backbone.model_copy(update={"mode": mode}),
                "policy": base.policy.model_copy(update={"ac_mode": ac_mode}),
            }
        )
        _start_run(config, raw, variant_dir)
        log.info("ablation variant %s / %s", bb_label, ac_label)
        result = train(config, variant_dir, workers=args.workers, progress=_progress)
        summary.append(
            {
                "label": f"{bb_label} / {ac_label}",
                "backbone": bb_label,
                "actor_critic": ac_label,
                "final_success_trailing": result.success_trailing,
                "episodes": result.episodes,
                "metrics": str(result.metrics_path.relative_to(root)),
                "checkpoint": str(result.final_checkpoint.relative_to(root)),
            }
        )
    _write_json(root / "summary.json", {"seed": base.seed, "variants": summary})
    lines = [f"{v['label']:<36} {v['final_success_trailing']:.3f}" for v in summary]
    text = "\n".join(["variant                              final trailing success"] + lines) + "\n"
    (root / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def _parse_cell(text: str) -> tuple[int, int]:
    if text == "argmax-of-uniform":
        idx, _ = greedy_action(np.zeros((MAP_SIZE, MAP_SIZE)))
        return divmod(idx, MAP_SIZE)
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--cell must be R,C or argmax-of-uniform, got {text!r}") from exc
    if not (0 <= r < MAP_SIZE and 0 <= c < MAP_SIZE):
        raise UsageError(f"--cell out of range 0..{MAP_SIZE - 1}")
    return r, c


def cmd_decode(args) -> int:
    mask = load_mask(args.mask)
    depth = load_depth(args.depth)
    cell = _parse_cell(args.cell)
    plan = decode(cell, mask, depth)
    doc = plan.to_dict()
    jsonschema.validate(doc, PLAN_SCHEMA)
    out = Path(args.out)
    _write_json(out / "plan.json", doc)
    overlay(plan, mask).save(out / "overlay.png")
    print(json.dumps(doc))
    return EXIT_OK


def _expand_families(text: str) -> list[str]:
    families = []
    for name in (t.strip() for t in text.split(",")):
        if not name:
            continue
        families.extend(FAMILY_GROUPS.get(name, (name,)))
    return families


def cmd_gen_objects(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    families = _expand_families(args.families)
    manifest = make_manifest(families, args.count, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(dump_manifest(manifest))
    previews = out / "previews"
    for i, entry in enumerate(manifest["objects"]):
        obj = generate_object(entry["family"], entry["seed"])
        obs = rasterize(Scene(obj, Pose2D(0.5, 0.5, 0.0)))
        save_observation(obs, previews, f"{i:03d}_{entry['family']}")
    print(f"{len(manifest['objects'])} objects -> {out / 'manifest.json'}")
    return EXIT_OK


def cmd_render(args) -> int:
    try:
        records = read_records(args.record)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read record stream {args.record}: {exc}") from exc
    if args.limit is not None:
        records = records[: args.limit]
    out = Path(args.out)
    for rec in records:
        scene = scene_from_record(rec)
        obs = rasterize(scene)
        stem = str(rec.get("index", 0))
        save_observation(obs, out, stem)
        plan = decode(tuple(rec["action"]), obs.mask, obs.depth, scene.edges_world())
        overlay(plan, obs.mask, obs.color).save(out / f"{stem}_overlay.png")
    print(f"rendered {len(records)} episodes -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flatgrasp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a policy")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--workers", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation on an object manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--objects", required=True)
    e.add_argument("--runs", type=int, default=DEFAULT_RUNS)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="fixed/adaptive backbone x shared/independent AC grid")
    a.add_argument("--config", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--out")
    a.add_argument("--workers", type=int)
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("decode", help="decode one grasp plan from mask/depth images")
    d.add_argument("--mask", required=True)
    d.add_argument("--depth", required=True)
    d.add_argument("--cell", default="argmax-of-uniform")
    d.add_argument("--out", default=".")
    d.set_defaults(func=cmd_decode)

    g = sub.add_parser("gen-objects", help="write a frozen object manifest with previews")
    g.add_argument("--families", required=True, help="comma-separated families or groups")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", default=".")
    g.set_defaults(func=cmd_gen_objects)

    r = sub.add_parser("render", help="dump heightmap PNGs and overlays for recorded episodes")
    r.add_argument("--record", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--limit", type=int)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ManifestError, ImageError, ckpt_io.CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

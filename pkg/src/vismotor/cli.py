"""Command-line entry point: ``vismotor <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import blockworld as bw
from . import config as C
from . import dataset as ds
from . import evaluate as E
from . import train as T
from .kinematics import load_arm
from .model import SharedVisuomotorNet, load_checkpoint
from .scene import NoiseParams, framed_camera

log = logging.getLogger("vismotor")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p, out_required=True):
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--seed", type=int, help="overrides seeds.dataset and seeds.train")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vismotor", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-dataset", help="render an annotated dataset")
    _common(p)
    p.add_argument("--layouts", type=int)
    p.add_argument("--backgrounds", type=int)
    p.add_argument("--noise", type=int)
    p.add_argument("--max-blocks", type=int)

    p = sub.add_parser("train", help="train one network")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--iterations", type=int)
    p.add_argument("--init", help="checkpoint to start from")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--detection", action="store_true", help="detection-only recipe")
    mode.add_argument("--multitask", action="store_true", help="joint recipe (default)")

    p = sub.add_parser("ablate", help="train all task combinations")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--iterations", type=int)
    p.add_argument("--trials", type=int)

    for name, text in (("eval-detect", "per-class AP"), ("eval-grasp", "visuomotor MSE"),
                       ("analyze-bias", "per-cell mAP and count correlation")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--dataset")
        p.add_argument("--checkpoint")
        p.add_argument("--split", choices=("val", "train", "all"), default="val")

    p = sub.add_parser("report", help="collect run outputs into tables and plots")
    _common(p)
    p.add_argument("--runs", nargs="+", required=True, help="training or ablation output directories")
    return parser


# ---------------------------------------------------------------------------

def _resolved(args) -> dict:
    cfg = C.load(args.config)
    if args.seed is not None:
        cfg["seeds"]["dataset"] = cfg["seeds"]["train"] = args.seed
    cfg["paths"]["out"] = args.out
    return cfg


def _out(cfg) -> Path:
    out = C.path_in_root(cfg, C.require(cfg, "paths.out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_dir(cfg, args) -> Path:
    if getattr(args, "dataset", None):
        cfg["paths"]["dataset"] = args.dataset
    return C.path_in_root(cfg, C.require(cfg, "paths.dataset"))


def _splits(cfg, root):
    m = ds.load_manifest(root)
    d = cfg["dataset"]
    return ds.split(m, d["val_backgrounds"], mode=d["split"], val_fraction=d["val_fraction"],
                    seed=cfg["seeds"]["dataset"])


def _pick(train, val, which):
    return {"train": train, "val": val, "all": train + val}[which]


def _model(cfg, args) -> SharedVisuomotorNet:
    if getattr(args, "checkpoint", None):
        cfg["paths"]["checkpoint"] = args.checkpoint
    model, _ = load_checkpoint(C.path_in_root(cfg, C.require(cfg, "paths.checkpoint")))
    return model


def _fresh_model(cfg, seed: int) -> SharedVisuomotorNet:
    import torch

    torch.manual_seed(seed)
    return SharedVisuomotorNet(C.network_config(cfg))


def cmd_gen_dataset(args, cfg):
    d = cfg["dataset"]
    for key in ("layouts", "backgrounds", "noise", "max_blocks"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    out = _out(cfg)
    seed = cfg["seeds"]["dataset"]
    layouts = [bw.sample_layout(seed * 1_000_003 + i, d["min_blocks"], d["max_blocks"]) for i in range(d["layouts"])]
    bgs = list(range(d["backgrounds"]))
    every = d["distractor_every"]
    cam = cfg["camera"]
    noise = NoiseParams(d["noise_scale"], d["noise_rot_xy_deg"], d["noise_rot_z_deg"], d["noise_displacement"])
    m = ds.build_dataset(layouts, bgs, d["noise"],
                         framed_camera(tuple(cam["image_size"]), cam["eye"], cam["target"], cam["cell_size"]),
                         load_arm(cfg["arm"]["profile"]), out, seed=seed,
                         distractor_backgrounds=bgs[::every] if every else (),
                         val_backgrounds=d["val_backgrounds"], noise=noise, cell_size=cam["cell_size"],
                         min_visible=d["min_visible"])
    return {"samples": m.sample_count, "skipped": m.skipped, "expected": ds.expected_count(len(layouts), len(bgs), d["noise"]),
            "records_hash": m.records_hash}


def cmd_train(args, cfg):
    if args.detection:
        cfg["train"]["mode"] = "detection"
    elif args.multitask:
        cfg["train"]["mode"] = "multitask"
    mode = cfg["train"]["mode"]
    if args.iterations is not None:
        cfg["train"][mode]["iterations"] = args.iterations
    if args.init:
        cfg["train"]["init"] = args.init
    train_set, val_set = _splits(cfg, _dataset_dir(cfg, args))
    tc = C.train_config(cfg)
    if cfg["train"]["init"]:
        model, _ = load_checkpoint(C.path_in_root(cfg, cfg["train"]["init"]))
    else:
        model = _fresh_model(cfg, tc.seed)
    out = _out(cfg)
    rep = T.train(model, train_set, tc, out, val_set)
    return {"mode": mode, "iterations": tc.iterations, "final_val": rep.final_val,
            "lr_changes": len(rep.lr_log), "wall_time": rep.wall_time}


def cmd_ablate(args, cfg):
    mt = cfg["train"]["multitask"]
    if args.iterations is not None:
        mt["iterations"] = args.iterations
    if args.trials is not None:
        mt["trials"] = args.trials
    train_set, val_set = _splits(cfg, _dataset_dir(cfg, args))
    base = C.train_config(cfg, "multitask")
    out = _out(cfg)
    reports, rows = T.run_ablation(base, train_set, val_set, lambda s: _fresh_model(cfg, s), out_dir=out)
    E.write_csv(out / "ablation.csv", E.ABLATION_FIELDS, rows)
    table = T.format_ablation_table(rows)
    (out / "ablation.txt").write_text(table + "\n")
    return {"runs": sum(len(v) for v in reports.values()), "table": table}


def _detect(cfg, args):
    model = _model(cfg, args)
    train_set, val_set = _splits(cfg, _dataset_dir(cfg, args))
    samples = _pick(train_set, val_set, args.split)
    ev = cfg["eval"]
    results, joints = E.evaluate_model(model, samples, cfg["dataset"]["min_visible"], score_thresh=ev["score_thresh"],
                                       nms_iou=ev["nms_iou"], max_dets=ev["max_dets"])
    return samples, results, joints


def cmd_eval_detect(args, cfg):
    samples, results, _ = _detect(cfg, args)
    aps = E.class_aps(results, cfg["eval"]["iou"], cfg["eval"]["ap_mode"])
    counts = ds.class_histogram(samples, cfg["dataset"]["min_visible"])
    out = _out(cfg)
    rows = [{"class_index": k, "class_name": bw.CLASS_NAMES[k], "instances": int(counts[k]), "ap": float(aps[k])}
            for k in range(bw.NUM_CLASSES)]
    E.write_csv(out / "class_ap.csv", E.CLASS_AP_FIELDS, rows)
    res = {"mean_ap": E.mean_ap(aps), "samples": len(samples)}
    (out / "detect.json").write_text(json.dumps(res, indent=2))
    return res


def cmd_eval_grasp(args, cfg):
    model = _model(cfg, args)
    train_set, val_set = _splits(cfg, _dataset_dir(cfg, args))
    res = E.visuomotor_eval(model, _pick(train_set, val_set, args.split))
    out = _out(cfg)
    (out / "grasp.json").write_text(json.dumps(res, indent=2))
    return {"mse": res["mse"], "std": res["std"], "samples": len(res["per_sample"])}


def cmd_analyze_bias(args, cfg):
    samples, results, _ = _detect(cfg, args)
    ev = cfg["eval"]
    aps = E.class_aps(results, ev["iou"], ev["ap_mode"])
    grid, counts = E.cell_maps(results, ev["iou"], ev["ap_mode"])
    bias = E.analyze_bias(aps, grid, ds.class_histogram(samples, cfg["dataset"]["min_visible"]), counts)
    out = _out(cfg)
    E.emit_report(bias, out)
    return {"mean_ap": bias.mean_ap, "pearson": bias.pearson,
            "quadratic": None if bias.quadratic is None else bias.quadratic.tolist()}


def cmd_report(args, cfg):
    curves, rows = {}, []
    for run in map(Path, args.runs):
        if (run / "ablation.csv").exists():
            rows += E.read_csv(run / "ablation.csv")
        for rep in sorted(run.glob("**/report.jsonl")):
            recs = [json.loads(line) for line in rep.read_text().splitlines() if line.strip()]
            for key in ("mse", "fl", "sl1"):
                vals = [r[key] for r in recs if key in r]
                if vals:
                    curves[f"{rep.parent.name}:{key}"] = vals
        if not (run / "ablation.csv").exists() and not list(run.glob("**/report.jsonl")):
            raise FileNotFoundError(f"no reports under {run}")
    out = _out(cfg)
    E.emit_report(None, out, rows, curves)
    if rows:
        (out / "ablation.txt").write_text(T.format_ablation_table(rows) + "\n")
    return {"curves": len(curves), "ablation_rows": len(rows)}


COMMANDS = {
    "gen-dataset": cmd_gen_dataset, "train": cmd_train, "ablate": cmd_ablate,
    "eval-detect": cmd_eval_detect, "eval-grasp": cmd_eval_grasp,
    "analyze-bias": cmd_analyze_bias, "report": cmd_report,
}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"status": "error", "type": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail("usage", str(e), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolved(args)
        result = COMMANDS[args.command](args, cfg)
        C.dump(cfg, _out(cfg) / "config.yaml")
    except C.RunConfigError as e:
        return _fail("config", str(e), 2)
    except (OSError, ValueError, RuntimeError) as e:
        return _fail(type(e).__name__, str(e), 1)
    print(json.dumps({"status": "ok", "command": args.command, **result}, default=_json_default))
    return 0


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


if __name__ == "__main__":
    sys.exit(main())

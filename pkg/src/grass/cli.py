"""Command line entry point: ``grass <command> [options] [--dotted.key value ...]``.

Outputs go under ``$GRASS_OUTPUT_ROOT`` (default ``./runs``). Each run directory
gets a ``config.yaml`` holding the fully resolved configuration it ran with.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import plotting
from .config import RunConfig, apply_overrides, dump_config, load_config, to_dict
from .errors import DataError, GrassError, UsageError
from .evalseg import (
    SegDecoder,
    SegmentationModel,
    analyze_object_counts,
    evaluate,
    finetune,
    summarize_object_counts,
)
from .synthdata import MosaicSpec, generate_dataset, load_dataset, save_dataset
from .trainer import RunLog, Trainer, load_model

log = logging.getLogger("grass")

OUTPUT_ENV = "GRASS_OUTPUT_ROOT"
SWEEP_ALIASES = {"warmup": "train.warmup_epochs", "threshold": "train.threshold", "seed": "seed"}
CHECKPOINT = "checkpoint_last.pt"
DECODER = "decoder.pt"
INCOMPLETE = "INCOMPLETE"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


# --- argument handling -----------------------------------------------------

def parse_overrides(extra: Sequence[str]) -> Dict[str, str]:
    """``--a.b 1 --c.d=2`` -> ``{"a.b": "1", "c.d": "2"}``."""
    out: Dict[str, str] = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise UsageError(f"unrecognised argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise UsageError(f"missing value for --{key}")
        out[key] = value
    return out


def parse_sweep(text: Optional[str]) -> Optional[Tuple[str, str, List[str]]]:
    """``warmup=0,50`` -> ``("warmup", "train.warmup_epochs", ["0", "50"])``."""
    if not text:
        return None
    if "=" not in text:
        raise UsageError(f"--sweep expects key=v1,v2,..., got {text!r}")
    name, values = text.split("=", 1)
    vals = [v.strip() for v in values.split(",") if v.strip()]
    if not vals:
        raise UsageError("--sweep needs at least one value")
    return name, SWEEP_ALIASES.get(name, name), vals


def resolve_config(args, overrides: Dict[str, str], base: Optional[RunConfig] = None) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else (base or RunConfig())
    cfg = apply_overrides(cfg, overrides)
    if args.seed is not None:
        cfg.set_seed(args.seed)
    return cfg


def with_sweep_value(cfg: RunConfig, key: str, value: str) -> RunConfig:
    if key == "seed":
        cfg = apply_overrides(cfg, {})
        cfg.set_seed(int(value))
        return cfg
    return apply_overrides(cfg, {key: value})


def run_dir(args, default_name: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return output_root() / (args.name or default_name)


def sweep_children(path: Path, marker: str) -> List[Path]:
    """``path`` itself if it holds ``marker``, else its immediate subdirectories that do."""
    if (path / marker).exists():
        return [path]
    found = sorted(p for p in path.iterdir() if (p / marker).exists()) if path.is_dir() else []
    if not found:
        raise DataError(f"no {marker} under {path}")
    return found


def write_csv(path: Path, rows: Sequence[dict], fields: Optional[Sequence[str]] = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(fields or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return path


def _data_paths(cfg: RunConfig) -> Tuple[Path, Path]:
    root = Path(cfg.data.root) if cfg.data.root else output_root() / "data" / "train"
    test = Path(cfg.data.test_root) if cfg.data.test_root else root.parent / "test"
    return root, test


def _load(path: Path, cfg: RunConfig, with_masks=True):
    if not path.exists():
        raise DataError(f"dataset {path} does not exist (run `grass make-data` first)")
    patches = load_dataset(path, with_masks=with_masks, size=cfg.data.image_size)
    if not patches:
        raise DataError(f"dataset {path} is empty")
    return patches


# --- commands --------------------------------------------------------------

def cmd_make_data(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if args.out else output_root() / "data"
    spec = MosaicSpec(image_size=cfg.data.image_size, num_classes=cfg.data.num_classes, texture_seed=args.texture_seed)
    seed = cfg.train.seed
    save_dataset(generate_dataset(spec, args.count, seed=seed), out / "train")
    save_dataset(generate_dataset(spec, args.test_count, seed=seed + 10_007), out / "test")
    cfg.data.root, cfg.data.test_root = str(out / "train"), str(out / "test")
    dump_config(cfg, out / "config.yaml")
    print(f"wrote {args.count} train / {args.test_count} test images to {out}")
    return out


class partial_outputs:
    """Leaves an ``INCOMPLETE`` marker in ``out`` unless the block finishes."""

    def __init__(self, out: Path):
        self.marker = Path(out) / INCOMPLETE

    def __enter__(self):
        self.marker.parent.mkdir(parents=True, exist_ok=True)
        self.marker.write_text("this run did not finish; outputs here are partial\n")

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.marker.unlink()
        return False


def _pretrain_one(cfg: RunConfig, out: Path, patches) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    if (out / "runlog.jsonl").exists():
        (out / "runlog.jsonl").unlink()
    with partial_outputs(out):
        trainer = Trainer(cfg.train, patches)
        run_log = trainer.run(out)
        plotting.plot_losses(run_log, out / "losses.png")
        rows = analyze_object_counts(run_log)
        if rows:
            write_csv(out / "object_counts.csv", rows)
    last = run_log[-1]
    print(f"{out}: {len(run_log)} epochs, final loss {last['mean_loss']:.4f}")
    return last


def cmd_pretrain(args, cfg: RunConfig, sweep) -> Path:
    out = run_dir(args, "pretrain")
    root, _ = _data_paths(cfg)
    patches = _load(root, cfg, with_masks=True) if (root / "masks").exists() else _load(root, cfg, with_masks=False)
    if cfg.train.encoder.input_size != cfg.data.image_size:
        cfg = apply_overrides(cfg, {"train.encoder.input_size": cfg.data.image_size})
    if not sweep:
        _pretrain_one(cfg, out, patches)
        return out
    name, key, values = sweep
    configs = [(v, with_sweep_value(cfg, key, v)) for v in values]  # validate all before training any
    for v, c in configs:
        _pretrain_one(c, out / f"{name}_{v}", patches)
    return out


def _finetune_one(run: Path, args, overrides, patches_cache) -> None:
    cfg = resolve_config(argparse.Namespace(config=None, seed=args.seed), overrides, load_config(run / "config.yaml"))
    root, _ = _data_paths(cfg)
    if root not in patches_cache:
        patches_cache[root] = _load(root, cfg)
    net = load_model(run / CHECKPOINT)
    dump_config(cfg, run / "finetune_config.yaml")
    with partial_outputs(run):
        model = finetune(net, patches_cache[root], cfg.data.num_classes, cfg.finetune)
        torch.save({"decoder": model.decoder.state_dict(), "finetune": to_dict(cfg.finetune),
                    "num_classes": cfg.data.num_classes, "feature_dim": net.encoder_spec.feature_dim}, run / DECODER)
    print(f"{run}: decoder trained on {cfg.finetune.fraction:.2%} of {len(patches_cache[root])} images")


def cmd_finetune(args, overrides) -> None:
    cache: dict = {}
    for run in sweep_children(Path(args.run), CHECKPOINT):
        _finetune_one(run, args, overrides, cache)


def load_segmentation(run: Path) -> SegmentationModel:
    state = torch.load(run / DECODER, map_location="cpu", weights_only=False)
    dec = state["finetune"]["decoder"]
    decoder = SegDecoder(state["feature_dim"], state["num_classes"], dec["hidden_dim"], dec["upsample_blocks"])
    decoder.load_state_dict(state["decoder"])
    return SegmentationModel(load_model(run / CHECKPOINT).encoder, decoder, state["num_classes"])


def cmd_evaluate(args, overrides) -> None:
    cache: dict = {}
    for run in sweep_children(Path(args.run), DECODER):
        cfg = apply_overrides(load_config(run / "finetune_config.yaml"), overrides)
        _, test = _data_paths(cfg)
        test = Path(args.test_data) if args.test_data else test
        if test not in cache:
            cache[test] = _load(test, cfg)
        metrics = evaluate(load_segmentation(run), cache[test])
        (run / "metrics.csv").write_text(metrics.to_csv())
        with open(run / "metrics.json", "w") as fh:
            json.dump(metrics.as_dict(), fh, indent=2)
        print(f"{run}: {metrics.summary()}")


def cmd_analyze_objects(args) -> None:
    for run in sweep_children(Path(args.run), "runlog.jsonl"):
        rows = analyze_object_counts(RunLog.read(run / "runlog.jsonl"))
        if not rows:
            raise DataError(f"{run} has no object-count records (pretrain on data with masks)")
        write_csv(run / "object_counts.csv", rows)
        summary = summarize_object_counts(rows, args.last)
        write_csv(run / "object_counts_summary.csv",
                  [{"arm": arm, **vals} for arm, vals in summary.items()], ["arm", "mean_classes", "single_class"])
        plotting.plot_object_counts(rows, run / "object_counts.png")
        for arm, vals in summary.items():
            print(f"{run} {arm}: {vals['mean_classes']:.3f} classes, {vals['single_class']:.2f} single-class")


def cmd_visualize_lam(args, overrides) -> None:
    for run in sweep_children(Path(args.run), CHECKPOINT):
        cfg = apply_overrides(load_config(run / "config.yaml"), overrides)
        root, _ = _data_paths(cfg)
        patches = _load(root, cfg, with_masks=False)
        n = min(max(args.count, 2), len(patches))
        trainer = Trainer.from_checkpoint(run / CHECKPOINT, patches, cfg=cfg.train)
        examples = trainer.attention_examples(np.arange(n))
        # one view per source image
        picked = [ex for ex in examples if ex["record"].view_index == 0]
        plotting.plot_lam_grid(picked, run / "lam_grid.png", max_rows=n)
        for ex in examples:
            rec = ex["record"]
            plotting.plot_lam_triplet(ex, run / "lam" / f"{rec.source_id}_v{rec.view_index}.png")
        rows = [{"source_id": ex["record"].source_id, "view": ex["record"].view_index,
                 "x": ex["dar"].box[0], "y": ex["dar"].box[1], "h": ex["dar"].box[2], "w": ex["dar"].box[3],
                 "peak": ex["dar"].peak, "fallback": ex["dar"].fallback} for ex in examples]
        write_csv(run / "lam_boxes.csv", rows)
        print(f"{run}: wrote lam_grid.png")


def _flatten_params(cfg: dict) -> dict:
    t = cfg["train"]
    return {"seed": t["seed"], "total_epochs": t["total_epochs"], "warmup_epochs": t["warmup_epochs"],
            "threshold": t["threshold"], "fraction": cfg["finetune"]["fraction"]}


def _label(root: Path, run: Path, multi: bool) -> str:
    rel = str(run.relative_to(root))
    name = root.name if multi else ""
    return "/".join(x for x in (name, "" if rel == "." else rel) if x) or run.name


def cmd_report(args) -> Path:
    import yaml

    roots = [Path(r) for r in args.run]
    out = Path(args.out) if args.out else (roots[0] / "report" if len(roots) == 1 else output_root() / "report")
    rows = []
    for root in roots:
        for mfile in sorted(root.rglob("metrics.json")):
            run = mfile.parent
            with open(run / "finetune_config.yaml") as fh:
                params = _flatten_params(yaml.safe_load(fh))
            m = json.loads(mfile.read_text())
            arm = "warmup-only" if params["warmup_epochs"] >= params["total_epochs"] else "grass"
            rows.append({"run": _label(root, run, len(roots) > 1), "arm": arm, **params,
                         "oa": 100 * m["oa"], "miou": 100 * m["miou"], "macc": 100 * m["macc"]})
    if not rows:
        raise DataError(f"no evaluated runs under {', '.join(map(str, roots))}")
    write_csv(out / "results.csv", rows)
    for key in ("warmup_epochs", "threshold"):
        vals = sorted({r[key] for r in rows})
        if len(vals) > 1:
            groups = {v: [r["miou"] for r in rows if r[key] == v] for v in vals}
            means = [float(np.mean(groups[v])) for v in vals]
            stds = [float(np.std(groups[v])) for v in vals]
            write_csv(out / f"sweep_{key}.csv", [{key: v, "miou_mean": m, "miou_std": s, "n": len(groups[v])}
                                                 for v, m, s in zip(vals, means, stds)])
            plotting.plot_sweep(vals, {"mIoU": means}, out / f"sweep_{key}.png", key.replace("_", " "),
                                errors={"mIoU": stds})
    arms = sorted({r["arm"] for r in rows})
    summary = [{"arm": a, "miou_mean": float(np.mean([r["miou"] for r in rows if r["arm"] == a])),
                "miou_std": float(np.std([r["miou"] for r in rows if r["arm"] == a])),
                "n": sum(r["arm"] == a for r in rows)} for a in arms]
    write_csv(out / "arms.csv", summary)
    plotting.plot_bars(arms, [s["miou_mean"] for s in summary], out / "arms.png", [s["miou_std"] for s in summary])
    plotting.plot_bars([r["run"] for r in rows], [r["miou"] for r in rows], out / "miou.png")
    for root in roots:
        for rl in sorted(root.rglob("runlog.jsonl")):
            rows_oc = analyze_object_counts(RunLog.read(rl))
            name = _label(root, rl.parent, len(roots) > 1).replace("/", "_")
            if rows_oc:
                plotting.plot_object_counts(rows_oc, out / f"object_counts_{name}.png")
    print(f"report: {len(rows)} runs -> {out}")
    return out


# --- entry -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grass", description="Gradient-guided sampling for contrastive pretraining.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, sweep=False):
        if config:
            sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--seed", type=int, help="sets train, augmentation and fine-tune seeds")
        if sweep:
            sp.add_argument("--sweep", help="key=v1,v2,... (warmup, threshold, seed or a dotted key)")
        return sp

    s = common(sub.add_parser("make-data", help="write a synthetic mosaic dataset"))
    s.add_argument("--count", type=int, default=1024)
    s.add_argument("--test-count", type=int, default=256)
    s.add_argument("--texture-seed", type=int, default=0)
    s.add_argument("--out")

    s = common(sub.add_parser("pretrain", help="contrastive pretraining (warm-up then guided)"), sweep=True)
    s.add_argument("--name", help="run directory name under the output root")
    s.add_argument("--out")

    for name, help_ in [("finetune", "train a segmentation decoder on a frozen encoder"),
                        ("evaluate", "segmentation metrics on the test set"),
                        ("analyze-objects", "per-arm object-count statistics"),
                        ("visualize-lam", "LAM / DAR / DACrop figure"),
                        ("report", "aggregate metrics into CSV tables and figures")]:
        s = common(sub.add_parser(name, help=help_), config=False)
        s.add_argument("--run", required=True, nargs="+" if name == "report" else None,
                       help="run directory (or a sweep directory)")
        if name == "evaluate":
            s.add_argument("--test-data")
        if name == "analyze-objects":
            s.add_argument("--last", type=int, default=10, help="average over the last N guided epochs")
        if name == "visualize-lam":
            s.add_argument("--count", type=int, default=6)
        if name == "report":
            s.add_argument("--out")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = parse_overrides(extra)
        if args.command == "make-data":
            cmd_make_data(args, resolve_config(args, overrides))
        elif args.command == "pretrain":
            sweep = parse_sweep(args.sweep)
            cmd_pretrain(args, resolve_config(args, overrides), sweep)
        elif args.command == "finetune":
            cmd_finetune(args, overrides)
        elif args.command == "evaluate":
            cmd_evaluate(args, overrides)
        elif args.command == "analyze-objects":
            cmd_analyze_objects(args)
        elif args.command == "visualize-lam":
            cmd_visualize_lam(args, overrides)
        elif args.command == "report":
            cmd_report(args)
    except (GrassError, ValueError) as exc:
        print(f"grass: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"grass: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

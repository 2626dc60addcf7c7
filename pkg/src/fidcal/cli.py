"""``fidcal`` command line.

Every verb works inside one workspace directory (``--out``). Models are cached
there, so later verbs reuse whatever earlier verbs trained. Configuration is
the profile defaults, then ``--config FILE``, then ``--set key.path=value``.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import degrade as dg
from .config import get_key, load_config, set_key
from .experiments import (VARIANT_KEYS, ExperimentPlan, MissingCheckpoint, Workspace,
                          activation_report, run_ablation, run_matrix, run_variants,
                          write_run_config)
from .fidelity import compute_fidelity, estimate_fidelity, load_estimator
from .imaging import IMAGE_SUFFIXES, decode_image, encode_png
from .io import write_array
from .restore import denoise, load_denoiser
from .synth import make_desk_corpus
from .train import read_curves

log = logging.getLogger("fidcal")

VERBS = ("make-desk-data", "split", "degrade", "restore", "fidelity", "train-classifier",
         "train-restorer", "train-estimator", "train-calib", "eval-matrix", "ablate", "variants",
         "activations", "report")


def _common(p):
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--config", help="YAML/JSON file merged over the profile")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. calib.modules.ensemble=true")
    p.add_argument("--seed", type=int, help="same as --set seed=N")
    p.add_argument("--out", required=True, help="workspace / output directory")
    p.add_argument("--data", help="dataset root (same as --set data.root=DIR)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="fidcal", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)
    ps = {v: sub.add_parser(v) for v in VERBS}
    for p in ps.values():
        _common(p)

    ps["make-desk-data"].add_argument("--per-class", type=int, default=100)

    p = ps["degrade"]
    p.add_argument("--in", dest="src", required=True, help="image file or directory")
    p.add_argument("--kind", choices=dg.KINDS, default="awgn")
    p.add_argument("--sigma", "--level", dest="level", type=float, default=0.0)
    p.add_argument("--variation", choices=dg.VARIATIONS, default="uniform")
    p.add_argument("--level-hi", type=float)
    p.add_argument("--level-lo", type=float)
    p.add_argument("--anchor", choices=("anchor-low", "anchor-high"))

    p = ps["restore"]
    p.add_argument("--in", dest="src", required=True)
    p.add_argument("--ckpt", help="denoiser checkpoint (default: workspace restorer)")

    p = ps["fidelity"]
    p.add_argument("--in", dest="src", required=True, help="restored (oracle) or degraded (estimate) images")
    p.add_argument("--mode", choices=("oracle", "estimate"), required=True)
    p.add_argument("--clean", help="clean images mirroring --in (oracle mode)")
    p.add_argument("--metric", choices=("l1", "l2", "cosine"), default="l1")
    p.add_argument("--ckpt", help="estimator checkpoint (default: workspace estimator)")

    ps["train-classifier"].add_argument(
        "--regime", choices=("setup1_clean", "setup2_degraded", "setup3_restored"), default="setup1_clean")
    p = ps["train-calib"]
    p.add_argument("--source", choices=("oracle", "pretrained", "end2end"))
    p.add_argument("--ensemble", action="store_true")

    p = ps["eval-matrix"]
    p.add_argument("--rows", default="setup1,setup2,setup3,oracle,pretrained,end2end",
                   help="comma list of setup1|setup2|setup3|oracle|pretrained|end2end")
    p.add_argument("--columns", help="comma list of clean,0.1,...,1D,2D (default all)")
    p.add_argument("--no-build", action="store_true", help="fail instead of training missing models")

    p = ps["ablate"]
    p.add_argument("--modules", default="spatial_mult,residual,spatial_add,channel_mult,channel_concat",
                   help="comma list; join names with + to remove them together")
    p.add_argument("--columns")
    p.add_argument("--no-build", action="store_true")

    p = ps["variants"]
    p.add_argument("--kind", choices=sorted(VARIANT_KEYS), required=True)
    p.add_argument("--columns")
    p.add_argument("--no-build", action="store_true")

    p = ps["activations"]
    p.add_argument("--class-id", type=int, default=0)
    p.add_argument("--regime", default="setup1_clean")
    p.add_argument("--restoration", action="store_true")
    p.add_argument("--levels", default="0,0.1,0.2,0.3,0.4,0.5")
    return ap


def _config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.data:
        overrides.append(f"data.root={args.data}")
    return load_config(args.profile, args.config, overrides)


def _image_files(src):
    src = Path(src)
    if src.is_file():
        return src.parent, [src]
    files = sorted(p for p in src.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no images found under {src}")
    return src, files


def _mirror(out, base, f, suffix):
    dst = Path(out) / f.relative_to(base)
    dst.parent.mkdir(parents=True, exist_ok=True)
    return dst.with_suffix(suffix)


def _columns(arg):
    return arg.split(",") if arg else None


def _save_report(ws, rep, stem):
    rep.save(ws.path(stem))
    sys.stdout.write(rep.render())


def cmd_make_desk_data(args, cfg):
    classes = make_desk_corpus(args.out, per_class=args.per_class, seed=int(cfg["seed"]),
                               size_range=tuple(get_key(cfg, "data.synth.size_range", (36, 56))))
    print(f"wrote {len(classes)} classes × {args.per_class} images to {args.out}")


def cmd_split(args, cfg):
    sp = Workspace(args.out, cfg).split()
    print(f"{len(sp.train)} train / {len(sp.val)} val / {len(sp.test)} test, "
          f"{sp.num_classes} classes -> {Path(args.out) / 'split.tsv'}")


def cmd_degrade(args, cfg):
    d = cfg["degradation"]
    spec = dg.DegradationSpec(
        args.kind, args.level, args.variation,
        args.level_hi if args.level_hi is not None else d["level_hi"],
        args.level_lo if args.level_lo is not None else d["level_lo"],
        int(cfg["seed"]), args.anchor or d["anchor"])
    base, files = _image_files(args.src)
    for i, f in enumerate(files):
        img = decode_image(f)
        if spec.kind != "awgn":
            encode_png(dg.apply(img, spec, i), _mirror(args.out, base, f, ".png"))
        else:
            out, field = dg.awgn(img, spec, dg.image_rng(spec.seed, i))
            encode_png(out, _mirror(args.out, base, f, ".png"))
            write_array(_mirror(args.out, base, f, ".sigma.fcarr"), field.astype(np.float32),
                        {"spec": spec.__dict__, "index": i, "source": str(f.relative_to(base))})
    print(f"degraded {len(files)} images ({spec.label()}) -> {args.out}")


def cmd_restore(args, cfg):
    model = load_denoiser(args.ckpt) if args.ckpt else Workspace(args.out, cfg).restorer(build=False)
    base, files = _image_files(args.src)
    dest = Path(args.out) / "restored"
    for f in files:
        encode_png(denoise(model, decode_image(f)), _mirror(dest, base, f, ".png"))
    print(f"restored {len(files)} images -> {dest}")


def cmd_fidelity(args, cfg):
    base, files = _image_files(args.src)
    dest = Path(args.out) / "fidelity"
    if args.mode == "oracle":
        if not args.clean:
            raise ValueError("--mode oracle needs --clean DIR")
        for f in files:
            clean = decode_image(Path(args.clean) / f.relative_to(base))
            compute_fidelity(decode_image(f), clean, args.metric).save(_mirror(dest, base, f, ".fcarr"))
    else:
        if args.metric != "l1":
            raise ValueError("the estimator predicts l1 maps only")
        model = load_estimator(args.ckpt) if args.ckpt else Workspace(args.out, cfg).estimator(build=False)
        for f in files:
            estimate_fidelity(model, decode_image(f)).save(_mirror(dest, base, f, ".fcarr"))
    print(f"wrote {len(files)} {args.metric} fidelity maps -> {dest}")


def cmd_train_classifier(args, cfg):
    ws = Workspace(args.out, cfg)
    ws.classifier(args.regime)
    _print_manifest(ws, f"classifier_{args.regime}")


def cmd_train_restorer(args, cfg):
    ws = Workspace(args.out, cfg)
    ws.restorer()
    _print_manifest(ws, "restorer")


def cmd_train_estimator(args, cfg):
    ws = Workspace(args.out, cfg)
    ws.estimator()
    _print_manifest(ws, "estimator")


def cmd_train_calib(args, cfg):
    ws = Workspace(args.out, cfg)
    source = args.source or cfg["calib"]["fidelity_source"]
    ensemble = args.ensemble or bool(cfg["calib"]["modules"].get("ensemble"))
    settings = ws.calib_settings(source, ensemble)
    ws.calibration(settings)
    _print_manifest(ws, ws.calib_name(settings))


def _print_manifest(ws, name):
    m = json.loads(ws.path(f"{name}.manifest.json").read_text())
    best = m.get("best_val_accuracy")
    extra = f", best val accuracy {best:.4f} at epoch {m['best_epoch']}" if best is not None else ""
    print(f"{name}: {ws.path(name + '.ckpt')}{extra}")


def cmd_eval_matrix(args, cfg):
    ws = Workspace(args.out, cfg)
    plan = ExperimentPlan.from_names(args.rows.split(","))
    plan.columns = _columns(args.columns)
    _save_report(ws, run_matrix(ws, plan, build=not args.no_build), "matrix")


def cmd_ablate(args, cfg):
    ws = Workspace(args.out, cfg)
    groups = [tuple(g.split("+")) for g in args.modules.split(",") if g]
    _save_report(ws, run_ablation(ws, groups, _columns(args.columns), build=not args.no_build), "ablation")


def cmd_variants(args, cfg):
    ws = Workspace(args.out, cfg)
    rep = run_variants(ws, args.kind, _columns(args.columns), build=not args.no_build)
    _save_report(ws, rep, f"variants_{args.kind}")


def cmd_activations(args, cfg):
    ws = Workspace(args.out, cfg)
    levels = tuple(float(s) for s in args.levels.split(","))
    tag = "restored" if args.restoration else "degraded"
    prefix = ws.path(f"activations_class{args.class_id}_{tag}")
    res = activation_report(ws, args.class_id, ws.classifier(args.regime), levels, args.restoration, prefix)
    print(f"mean |clean - sigma={levels[-1]:g}| gap {res['gap'].mean():.4f}; "
          f"wrote {prefix.with_suffix('.csv')} and {prefix.with_suffix('.png')}")


def plot_curves(csv_path, png_path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    rows = read_curves(csv_path)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3))
    for split in ("train", "val"):
        pts = [r for r in rows if r["split"] == split]
        ep = [r["epoch"] for r in pts]
        axes[0].plot(ep, [r["loss"] for r in pts], label=split)
        axes[1].plot(ep, [r["accuracy"] for r in pts], label=split)
    axes[0].set_ylabel("loss")
    axes[1].set_ylabel("accuracy")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.legend()
    fig.suptitle(Path(csv_path).stem)
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)


def cmd_report(args, cfg):
    """Plot every training curve and gather every saved report into one summary."""
    ws = Workspace(args.out, cfg)
    write_run_config(ws)
    for c in sorted(ws.out.glob("*.curves.csv")):
        plot_curves(c, c.with_name(c.name.replace(".curves.csv", ".curves.png")))
    sections = []
    rows = []
    for j in sorted(ws.out.glob("*.json")):
        if j.name.endswith(".manifest.json"):
            continue
        data = json.loads(j.read_text())
        if "cells" not in data:
            continue
        sections.append((ws.out / j.with_suffix(".txt").name).read_text())
        for label, cells in data["cells"].items():
            rows += [[j.stem, label, c, cells.get(c)] for c in data["columns"]]
    if not sections:
        raise ValueError(f"no reports under {ws.out}; run eval-matrix, ablate or variants first")
    summary = "\n".join(sections)
    ws.path("report.txt").write_text(summary)
    with open(ws.path("report.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["report", "method", "column", "accuracy"])
        w.writerows(rows)
    sys.stdout.write(summary)


HANDLERS = {v: globals()["cmd_" + v.replace("-", "_")] for v in VERBS}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _config(args)
        if args.verb == "make-desk-data":
            set_key(cfg, "data.root", args.out)
        HANDLERS[args.verb](args, cfg)
    except MissingCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

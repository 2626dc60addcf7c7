"""Experiment orchestration: a cached workspace of trained models plus the
accuracy matrix, ablation, variant and activation studies built on top.

Everything a workspace trains lands under its output directory as a
checkpoint, a training-curve CSV and a run manifest echoing the exact
configuration, so any report cell can be traced to the files that made it.
"""

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import backbones as bb
from .calibration import MODULES, build_calibration, load_calibration, save_calibration
from .config import dump_config
from .degrade import DegradationSpec
from .fidelity import (estimator_config, load_estimator, mixture_stats, save_estimator,
                       train_estimator)
from .imaging import load_split, read_manifest
from .io import atomic_write_text, file_sha256, write_json
from .restore import DenoiserConfig, DnCNN, PatchSampler, load_denoiser, save_denoiser, train_denoiser
from .synth import make_desk_corpus
from .train import (TrainConfig, degrade_stack, eval_stack, fidelity_batch, fit_calibration,
                    fit_classifier, predict_calibrated, predict_logits, restore_stack,
                    write_curves)

# Published ResNet-50 / Caltech-256 accuracies (%), kept for orientation only.
# Desk runs reproduce directions, never these magnitudes.
REFERENCE_RESULTS = {
    "columns": ["clean", "0.1", "0.2", "0.3", "0.4", "0.5", "1D", "2D"],
    "rows": {
        "setup 1 / w/o restoration": [83.20, 62.80, 30.24, 10.44, 3.73, 1.65, 28.60, 32.72],
        "setup 1 / w/ restoration": [83.23, 77.38, 68.20, 56.05, 42.40, 30.32, 65.65, 67.78],
        "setup 2 / w/o restoration": [79.27, 77.85, 74.95, 72.23, 69.49, 66.44, 73.88, 74.75],
        "setup 2 / w/ restoration": [79.17, 77.05, 73.68, 68.91, 62.59, 55.64, 71.83, 72.95],
        "setup 3 / w/o restoration": [80.76, 69.51, 46.22, 21.96, 8.84, 3.47, 43.23, 47.44],
        "setup 3 / w/ restoration": [80.85, 79.14, 76.78, 73.97, 70.73, 67.18, 75.78, 76.36],
        "oracle / w/o ensemble": [82.29, 80.24, 78.06, 76.24, 74.36, 72.38, 77.65, 78.03],
        "oracle / w/ ensemble": [82.37, 80.43, 78.17, 76.30, 74.43, 72.35, 77.89, 78.25],
        "pre-trained / w/o ensemble": [82.77, 79.01, 74.78, 69.86, 64.66, 58.73, 73.59, 74.46],
        "pre-trained / w/ ensemble": [83.13, 79.34, 75.21, 70.16, 64.62, 58.40, 73.97, 74.81],
        "end-to-end / w/o ensemble": [83.04, 79.54, 75.45, 70.40, 64.98, 58.99, 73.88, 75.06],
        "end-to-end / w/ ensemble": [83.22, 79.56, 75.57, 70.49, 64.92, 58.73, 74.10, 75.19],
    },
    "variants": {
        "l2 distance": [82.57, 80.15, 78.16, 76.21, 74.30, 72.00, 77.80],
        "cosine": [82.56, 79.53, 75.11, 69.54, 62.96, 55.70, 73.72],
        "bicubic": [82.39, 80.38, 78.15, 76.19, 74.26, 72.07, 77.76],
        "nearest": [82.52, 80.38, 78.02, 76.18, 74.22, 71.97, 77.71],
        "w/o spatial multiplication": [82.56, 80.30, 77.70, 75.38, 72.95, 70.29, 77.16],
        "w/o residual mechanism": [81.80, 79.80, 77.55, 75.53, 73.35, 70.99, 76.96],
        "w/o spatial addition": [82.61, 79.76, 77.00, 74.11, 71.44, 67.43, 76.19],
        "w/o channel multiplication": [82.42, 80.32, 78.10, 75.97, 74.15, 71.98, 77.47],
        "w/o channel concatenation": [82.13, 79.61, 76.57, 73.99, 71.50, 68.85, 76.19],
    },
}

SOURCES = {"oracle": "oracle", "pretrained": "estimator_frozen", "end2end": "estimator_finetuned"}
SOURCE_LABELS = {"oracle": "oracle", "pretrained": "pre-trained", "end2end": "end-to-end"}
BASELINES = {"setup1": "setup1_clean", "setup2": "setup2_degraded", "setup3": "setup3_restored"}


class MissingCheckpoint(FileNotFoundError):
    pass


# -- plans and reports -------------------------------------------------------

@dataclass
class ExperimentPlan:
    """Rows of the accuracy matrix; each row is evaluated on every column."""

    rows: list
    columns: list = None  # None: clean, every eval sigma, 1D, 2D
    seeds: dict = field(default_factory=dict)

    @classmethod
    def from_names(cls, names):
        rows = []
        for name in names:
            if name in BASELINES:
                n = name[-1]
                rows.append({"label": f"setup {n} / w/o restoration", "kind": "baseline",
                             "regime": BASELINES[name], "restoration": False})
                rows.append({"label": f"setup {n} / w/ restoration", "kind": "baseline",
                             "regime": BASELINES[name], "restoration": True})
            elif name in SOURCES:
                for ens in (False, True):
                    rows.append({"label": f"{SOURCE_LABELS[name]} / w{'/' if ens else '/o'} ensemble",
                                 "kind": "calib", "source": name, "ensemble": ens})
            else:
                raise ValueError(f"unknown plan row group {name!r}")
        return cls(rows)


@dataclass
class ExperimentReport:
    title: str
    columns: list
    cells: dict  # row label -> {column: accuracy %}
    manifests: dict = field(default_factory=dict)
    hashes: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_json(self):
        return json.dumps({"title": self.title, "columns": self.columns, "cells": self.cells,
                           "manifests": self.manifests, "hashes": self.hashes, "notes": self.notes},
                          indent=2, sort_keys=True) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method"] + self.columns)
        for label, row in self.cells.items():
            w.writerow([label] + [("skipped" if row.get(c) is None else f"{row[c]:.2f}")
                                  for c in self.columns])
        return buf.getvalue()

    def render(self):
        width = max([len("method")] + [len(k) for k in self.cells]) + 2
        head = "method".ljust(width) + "".join(c.rjust(9) for c in self.columns)
        lines = [self.title, head, "-" * len(head)]
        for label, row in self.cells.items():
            vals = "".join(("skip" if row.get(c) is None else f"{row[c]:.2f}").rjust(9)
                           for c in self.columns)
            lines.append(label.ljust(width) + vals)
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"

    def save(self, prefix):
        prefix = Path(prefix)
        atomic_write_text(prefix.with_suffix(".json"), self.to_json())
        atomic_write_text(prefix.with_suffix(".csv"), self.to_csv())
        atomic_write_text(prefix.with_suffix(".txt"), self.render())


def accuracy(logits, labels):
    return 100.0 * float((logits.argmax(1).numpy() == np.asarray(labels)).mean())


# -- workspace ---------------------------------------------------------------

class Workspace:
    """Lazily builds and caches every model and dataset view for one config."""

    def __init__(self, out, cfg):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self._cache = {}
        threads = cfg.get("runtime", {}).get("threads")
        if threads:
            torch.set_num_threads(int(threads))

    # configuration views
    @property
    def seed(self):
        return int(self.cfg["seed"])

    @property
    def crop_size(self):
        return int(self.cfg["data"]["crop_size"])

    @property
    def sigmas(self):
        return tuple(float(s) for s in self.cfg["degradation"]["sigmas"])

    def input_shape(self):
        return (3, self.crop_size, self.crop_size)

    def path(self, name):
        return self.out / name

    # data
    def data_root(self):
        root = self.cfg["data"].get("root")
        if root:
            return Path(root)
        synth = self.cfg["data"].get("synth")
        if not synth:
            raise ValueError("data.root is required for this profile")
        root = self.out / "corpus"
        if not (root / ".complete").exists():
            make_desk_corpus(root, per_class=synth["per_class"], seed=self.seed,
                             size_range=tuple(synth["size_range"]))
            (root / ".complete").write_text("ok\n")
        return root

    def split(self):
        if "split" not in self._cache:
            root = self.data_root()
            manifest = self.path("split.tsv")
            if manifest.exists():
                sp = read_manifest(root, manifest)
            else:
                sp = load_split(root, self.seed, self.cfg["data"]["train_per_class"],
                                self.cfg["data"]["val_fraction"])
                sp.write_manifest(manifest)
            self._cache["split"] = sp
        return self._cache["split"]

    def images(self, which):
        key = ("images", which)
        if key not in self._cache:
            self._cache[key] = self.split().load_images(which)
        return self._cache[key]

    def test_clean(self):
        if "test_clean" not in self._cache:
            imgs, _ = self.images("test")
            self._cache["test_clean"] = eval_stack(imgs, self.crop_size)
        return self._cache["test_clean"]

    # evaluation columns
    def column_specs(self, columns=None):
        d = self.cfg["degradation"]
        seed = int(d["test_seed"])
        specs = {"clean": DegradationSpec("awgn", 0.0, seed=seed)}
        for s in d["eval_sigmas"]:
            specs[f"{float(s):g}"] = DegradationSpec("awgn", float(s), seed=seed)
        specs["1D"] = DegradationSpec("awgn", 0.0, "varying_1d", d["level_hi"], d["level_lo"], seed,
                                      d["anchor"])
        specs["2D"] = DegradationSpec("awgn", 0.0, "varying_2d", d["level_hi"], d["level_lo"], seed,
                                      d["anchor"])
        if columns is not None:
            unknown = [c for c in columns if c not in specs]
            if unknown:
                raise ValueError(f"unknown evaluation columns {unknown}")
            specs = {c: specs[c] for c in columns}
        return specs

    def degraded(self, column):
        key = ("degraded", column)
        if key not in self._cache:
            spec = self.column_specs()[column]
            self._cache[key] = degrade_stack(self.test_clean(), spec)
        return self._cache[key]

    def restored(self, column):
        key = ("restored", column)
        if key not in self._cache:
            self._cache[key] = restore_stack(self.restorer(), self.degraded(column))
        return self._cache[key]

    # manifests
    def _manifest(self, name, kind, settings, inputs, **extra):
        m = {"name": name, "kind": kind, "profile": self.cfg.get("profile"), "seed": self.seed,
             "settings": settings, "inputs": inputs}
        m.update(extra)
        write_json(self.path(f"{name}.manifest.json"), m)
        return m

    def _missing(self, what, command):
        raise MissingCheckpoint(f"{what} not found under {self.out}; build it with `{command}`")

    # classifier baselines
    def classifier(self, regime="setup1_clean", build=True):
        key = ("classifier", regime)
        if key in self._cache:
            return self._cache[key]
        name = f"classifier_{regime}"
        ckpt = self.path(f"{name}.ckpt")
        if not ckpt.exists():
            if not build:
                self._missing(f"{regime} classifier",
                              f"fidcal train-classifier --regime {regime} --out {self.out}")
            self._train_classifier(regime, name)
        model, _ = bb.load_classifier(ckpt)
        self._cache[key] = model
        return model

    def _train_classifier(self, regime, name):
        sp = self.split()
        c = self.cfg["classifier"]
        tcfg = TrainConfig(optimizer=c["optimizer"], lr_init=c["lr_init"], batch_size=c["batch_size"],
                           epochs=c["epochs"], warmup_epochs=c["warmup_epochs"],
                           label_smoothing_eps=c["label_smoothing_eps"], seed=self.seed, regime=regime,
                           crop_size=self.crop_size, sigmas=self.sigmas)
        torch.manual_seed(self.seed)
        arch = self.cfg["backbone"]["arch"]
        kw = {"weights": self.cfg["backbone"]["weights"]} if arch == "resnet50" else {}
        model = bb.build_backbone(arch, sp.num_classes, **kw)
        den = self.restorer() if regime == "setup3_restored" else None
        tr, ytr = self.images("train")
        va, yva = self.images("val")
        res = fit_classifier(tr, ytr, va, yva, tcfg, model, denoiser=den)
        bb.save_classifier(self.path(f"{name}.ckpt"), res.model, arch, sp.num_classes,
                           best_epoch=res.best_epoch, best_val_accuracy=res.best_val_accuracy)
        write_curves(self.path(f"{name}.curves.csv"), res.history)
        inputs = {"split": file_sha256(self.path("split.tsv"))}
        if den is not None:
            inputs["restorer"] = file_sha256(self.path("restorer.ckpt"))
        self._manifest(name, "classifier", tcfg.__dict__ | {"arch": arch}, inputs,
                       best_epoch=res.best_epoch, best_val_accuracy=res.best_val_accuracy)
        return res

    def backbone_split(self):
        if "split_bb" not in self._cache:
            self._cache["split_bb"] = bb.split_backbone(self.classifier("setup1_clean")).freeze()
        return self._cache["split_bb"]

    # restorer / estimator
    def _patch_settings(self, section):
        r = self.cfg[section]
        return dict(sampler=PatchSampler(r["patch"], r["stride"]), sigmas=self.sigmas,
                    crop_size=self.crop_size, epochs=r["epochs"], lr=r["lr"],
                    batch_size=r["batch_size"], warmup_epochs=r["warmup_epochs"], seed=self.seed)

    def restorer(self, build=True):
        if "restorer" in self._cache:
            return self._cache["restorer"]
        ckpt = self.path("restorer.ckpt")
        if not ckpt.exists():
            if not build:
                self._missing("restorer", f"fidcal train-restorer --out {self.out}")
            r = self.cfg["restorer"]
            dcfg = DenoiserConfig(r["depth"], r["width"], r["kernel"], norm=r["norm"])
            model, hist = train_denoiser(self.images("train")[0], dcfg, **self._patch_settings("restorer"))
            save_denoiser(ckpt, model, history=hist)
            self._manifest("restorer", "denoiser", r, {"split": file_sha256(self.path("split.tsv"))},
                           final_l1=hist[-1])
        self._cache["restorer"] = load_denoiser(ckpt)
        return self._cache["restorer"]

    def estimator(self, build=True):
        if "estimator" in self._cache:
            return self._cache["estimator"]
        ckpt = self.path("estimator.ckpt")
        if not ckpt.exists():
            if not build:
                self._missing("fidelity estimator", f"fidcal train-estimator --out {self.out}")
            e = self.cfg["estimator"]
            model, hist = train_estimator(self.images("train")[0], self.restorer(),
                                          estimator_config(e["depth"], e["width"], e["kernel"], e["norm"]),
                                          **self._patch_settings("estimator"))
            save_estimator(ckpt, model, history=hist)
            self._manifest("estimator", "fidelity_estimator", e,
                           {"restorer": file_sha256(self.path("restorer.ckpt"))}, final_l1=hist[-1])
        self._cache["estimator"] = load_estimator(ckpt)
        return self._cache["estimator"]

    # calibration
    def calib_settings(self, source="oracle", ensemble=False, overrides=None):
        c = self.cfg["calib"]
        mods = dict(c["modules"])
        mods["ensemble"] = ensemble
        s = {"source": source, "modules": mods, "fidelity_metric": c["fidelity_metric"],
             "downsampling": c["downsampling"], "conv_hidden": c["conv_hidden"],
             "fc_hidden": c.get("fc_hidden"), "estimator_init": c.get("estimator_init", "pretrained"),
             "train": dict(c["train"])}
        for k, v in (overrides or {}).items():
            if k == "modules":
                s["modules"] = {**s["modules"], **v}
            else:
                s[k] = v
        return s

    @staticmethod
    def calib_name(settings):
        parts = ["calib", settings["source"], "ens" if settings["modules"]["ensemble"] else "noens"]
        off = [m for m in MODULES if m != "ensemble" and not settings["modules"].get(m, True)]
        parts += [f"no-{m}" for m in off]
        if settings["fidelity_metric"] != "l1":
            parts.append(f"metric-{settings['fidelity_metric']}")
        if settings["downsampling"] != "bilinear":
            parts.append(f"down-{settings['downsampling']}")
        if settings["source"] == "end2end" and settings["estimator_init"] != "pretrained":
            parts.append(f"est-{settings['estimator_init']}")
        return "_".join(parts)

    def calibration(self, settings, build=True):
        """Returns ``(calib_net, estimator_or_None)`` for ``settings``."""
        name = self.calib_name(settings)
        if ("calib", name) in self._cache:
            return self._cache[("calib", name)]
        split = self.backbone_split()
        ckpt = self.path(f"{name}.ckpt")
        if not ckpt.exists():
            if not build:
                self._missing(f"calibration {name}",
                              f"fidcal train-calib --source {settings['source']} --out {self.out}")
            self._train_calibration(settings, name, split)
        net, meta = load_calibration(ckpt, split)
        est = None
        if settings["source"] == "pretrained":
            est = self.estimator()
        elif settings["source"] == "end2end":
            est = load_estimator(self.path(f"{name}.estimator.ckpt"))
        self._cache[("calib", name)] = (net, est)
        return net, est

    def _train_calibration(self, settings, name, split):
        t = settings["train"]
        tcfg = TrainConfig(optimizer=t["optimizer"], lr_init=t["lr_init"], batch_size=t["batch_size"],
                           epochs=t["epochs"], warmup_epochs=t["warmup_epochs"],
                           label_smoothing_eps=t["label_smoothing_eps"], seed=self.seed,
                           regime=f"calib_{settings['source']}", crop_size=self.crop_size,
                           sigmas=self.sigmas, fidelity_metric=settings["fidelity_metric"])
        net = build_calibration(split, self.input_shape(), settings["modules"], settings["conv_hidden"],
                                settings["fc_hidden"], settings["downsampling"], seed=self.seed)
        est = None
        denoiser = self.restorer()
        inputs = {"classifier_setup1_clean": file_sha256(self.path("classifier_setup1_clean.ckpt")),
                  "restorer": file_sha256(self.path("restorer.ckpt"))}
        if settings["source"] == "pretrained":
            est = self.estimator()
            inputs["estimator"] = file_sha256(self.path("estimator.ckpt"))
        elif settings["source"] == "end2end":
            if settings["estimator_init"] == "pretrained":
                self.estimator()
                est = load_estimator(self.path("estimator.ckpt"))  # private copy to fine-tune
                inputs["estimator"] = file_sha256(self.path("estimator.ckpt"))
            else:
                e = self.cfg["estimator"]
                torch.manual_seed(self.seed)
                est = DnCNN(estimator_config(e["depth"], e["width"], e["kernel"], e["norm"]))
        tr, ytr = self.images("train")
        va, yva = self.images("val")
        res = fit_calibration(tr, ytr, va, yva, tcfg, split, net, denoiser, SOURCES[settings["source"]],
                              est, mixture_stats(self.sigmas))
        save_calibration(self.path(f"{name}.ckpt"), res.model, split, best_epoch=res.best_epoch,
                         best_val_accuracy=res.best_val_accuracy, settings=settings)
        if settings["source"] == "end2end":
            save_estimator(self.path(f"{name}.estimator.ckpt"), est)
        write_curves(self.path(f"{name}.curves.csv"), res.history)
        self._manifest(name, "calibration", settings, inputs, train=tcfg.__dict__,
                       best_epoch=res.best_epoch, best_val_accuracy=res.best_val_accuracy,
                       backbone_sha256=res.extra["backbone_sha256"])
        return res

    # evaluation
    def labels(self):
        return self.images("test")[1]

    def eval_classifier(self, model, restoration, columns=None):
        out = {}
        for col in self.column_specs(columns):
            x = self.restored(col) if restoration else self.degraded(col)
            out[col] = accuracy(predict_logits(model, x), self.labels())
        return out

    def eval_calibration(self, settings, columns=None, build=True):
        net, est = self.calibration(settings, build)
        split = self.backbone_split()
        stats = mixture_stats(self.sigmas)
        src = "oracle" if settings["source"] == "oracle" else "estimator"
        out = {}
        for col in self.column_specs(columns):
            restored = self.restored(col)
            with torch.no_grad():
                if est is not None:
                    est.eval()
                fid = fidelity_batch(restored, self.test_clean(), self.degraded(col), src,
                                     settings["fidelity_metric"], stats, est)
            out[col] = accuracy(predict_calibrated(split, net, restored, fid), self.labels())
        return out

    def hashes(self):
        return {p.name: file_sha256(p) for p in sorted(self.out.glob("*.ckpt"))}


# -- studies -----------------------------------------------------------------

def run_matrix(ws, plan, build=True):
    """Fill the accuracy grid for ``plan``; missing checkpoints are trained when ``build``."""
    cols = list(ws.column_specs(plan.columns))
    cells, manifests = {}, {}
    for row in plan.rows:
        if row["kind"] == "baseline":
            if row["restoration"]:
                ws.restorer(build=build)
            model = ws.classifier(row["regime"], build=build)
            cells[row["label"]] = ws.eval_classifier(model, row["restoration"], plan.columns)
            manifests[row["label"]] = f"classifier_{row['regime']}.manifest.json"
        else:
            settings = ws.calib_settings(row["source"], row["ensemble"])
            cells[row["label"]] = ws.eval_calibration(settings, plan.columns, build=build)
            manifests[row["label"]] = f"{ws.calib_name(settings)}.manifest.json"
    return ExperimentReport("Top-1 accuracy (%) by degradation", cols, cells, manifests, ws.hashes())


def run_ablation(ws, modules=("spatial_mult", "residual", "spatial_add", "channel_mult", "channel_concat"),
                 columns=None, build=True):
    """Full oracle model (no ensemble) plus one run per removed module.

    Entries of ``modules`` are module names or tuples of names removed together.
    """
    removable = [m for m in MODULES if m != "ensemble"]
    removals = []
    for entry in modules:
        group = (entry,) if isinstance(entry, str) else tuple(entry)
        unknown = [m for m in group if m not in removable]
        if unknown:
            raise ValueError(f"unknown or non-removable modules {unknown}")
        if set(group) >= set(removable):
            raise ValueError("removing every module leaves nothing to calibrate")
        removals.append(group)
    if not removals:
        raise ValueError("no modules to ablate")
    full = ws.calib_settings("oracle", False)
    cells = {"full model": ws.eval_calibration(full, columns, build)}
    manifests = {"full model": ws.calib_name(full)}
    for group in removals:
        s = ws.calib_settings("oracle", False, {"modules": {m: False for m in group}})
        label = "w/o " + " + ".join(group)
        cells[label] = ws.eval_calibration(s, columns, build)
        manifests[label] = ws.calib_name(s)
    cols = list(ws.column_specs(columns))
    deltas = {k: {c: round(v[c] - cells["full model"][c], 4) for c in cols} for k, v in cells.items()}
    rep = ExperimentReport("Ablation: oracle fidelity, no ensemble", cols, cells, manifests, ws.hashes())
    rep.notes.append("deltas vs full model: " + json.dumps(deltas, sort_keys=True))
    return rep


VARIANT_KEYS = {"fidelity_metric": ("l1", "l2", "cosine"),
                "downsampling": ("bilinear", "bicubic", "nearest")}


def run_variants(ws, kind, columns=None, build=True):
    if kind not in VARIANT_KEYS:
        raise ValueError(f"unknown variant study {kind!r}; choose from {sorted(VARIANT_KEYS)}")
    cells, manifests = {}, {}
    for value in VARIANT_KEYS[kind]:
        s = ws.calib_settings("oracle", False, {kind: value})
        cells[f"{kind}={value}"] = ws.eval_calibration(s, columns, build)
        manifests[f"{kind}={value}"] = ws.calib_name(s)
    return ExperimentReport(f"Variant study: {kind}", list(ws.column_specs(columns)), cells,
                            manifests, ws.hashes())


@torch.no_grad()
def class_activations(model, X01):
    """Mean final-feature activation per neuron over a stack of [0, 1] images."""
    split = bb.split_backbone(model)
    split.eval()
    from .train import to_model_input
    return split.features(to_model_input(X01)).mean(0).numpy()


def activation_report(ws, class_id, model=None, levels=(0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
                      restoration=False, out_prefix=None):
    """Per-neuron mean activations on validation images of one class across noise levels.

    Neurons are ordered by ``|mean(clean) - mean(most degraded)|`` (largest first).
    Writes ``<prefix>.csv`` and ``<prefix>.png`` when ``out_prefix`` is given.
    """
    model = model or ws.classifier("setup1_clean")
    imgs, labels = ws.images("val")
    sel = [im for im, y in zip(imgs, labels) if y == class_id]
    if not sel:
        raise ValueError(f"class {class_id} has no validation images")
    clean = eval_stack(sel, ws.crop_size)
    seed = int(ws.cfg["degradation"]["test_seed"])
    rows = []
    for s in levels:
        x = degrade_stack(clean, DegradationSpec("awgn", float(s), seed=seed))
        if restoration:
            x = restore_stack(ws.restorer(), x)
        rows.append(class_activations(model, x))
    means = np.stack(rows)
    gap = np.abs(means[0] - means[-1])
    order = np.argsort(-gap, kind="stable")
    result = {"levels": list(levels), "means": means, "order": order, "gap": gap}
    if out_prefix is not None:
        _write_activation_files(result, Path(out_prefix))
    return result


def _write_activation_files(result, prefix):
    levels, means, order = result["levels"], result["means"], result["order"]
    lines = ["rank,neuron," + ",".join(f"sigma_{s:g}" for s in levels)]
    for rank, n in enumerate(order):
        lines.append(f"{rank},{n}," + ",".join(f"{means[i, n]:.6f}" for i in range(len(levels))))
    atomic_write_text(prefix.with_suffix(".csv"), "\n".join(lines) + "\n")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(8, 3))
    for i, s in enumerate(levels):
        ax.plot(means[i, order], lw=1, label=f"sigma={s:g}")
    ax.set_xlabel("neuron (sorted by clean vs most-degraded gap)")
    ax.set_ylabel("mean activation")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(prefix.with_suffix(".png"), dpi=100)
    plt.close(fig)


def write_run_config(ws):
    atomic_write_text(ws.path("config.yaml"), dump_config(ws.cfg))

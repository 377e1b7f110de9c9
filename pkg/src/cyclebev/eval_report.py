"""Metrics, stratified evaluation, ablation orchestration and figures.

IoU convention: a class with an empty union (absent from both prediction and
ground truth) scores 1.  mIoU-style averages use global counts over the whole
evaluation set, not per-scene means.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .scene_synth import CLASSES, OBJECT_CLASSES, SceneBundle, object_instance_map

log = logging.getLogger(__name__)

VIS_THRESHOLD = 0.4
# drivable, vehicle, pedestrian
CLASS_COLORS = ((0.55, 0.55, 0.55), (0.12, 0.35, 0.85), (0.85, 0.15, 0.15))
ABLATION_ROWS = ("bce_only", "vcc_only", "vcc_height", "cyclebev", "cyclebev-single")
ROW_FLAGS = {
    # (VCC, Height, Align) as in the ablation table layout
    "bce_only": (False, False, False),
    "vcc_only": (True, False, False),
    "vcc_height": (True, True, False),
    "cyclebev": (True, True, True),
    "cyclebev-single": (True, True, True),
}


@dataclass
class IouTable:
    per_class: dict[str, float]
    stratum: str = "all"

    def __post_init__(self):
        for name, v in self.per_class.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"IoU for {name} out of range: {v}")

    @property
    def average(self) -> float:
        vals = list(self.per_class.values())
        return float(sum(vals) / len(vals)) if vals else float("nan")

    def as_dict(self) -> dict:
        return {"per_class": dict(self.per_class), "average": self.average, "stratum": self.stratum}

    @classmethod
    def from_dict(cls, d: dict) -> "IouTable":
        return cls(dict(d["per_class"]), d.get("stratum", "all"))


def _np(x) -> np.ndarray:
    if torch.is_tensor(x):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def iou_counts(pred_probs, gt, threshold: float = 0.5, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-class (intersection, union) counts; classes on axis -3.

    ``mask`` (broadcastable to one class slice) marks the cells that count.
    """
    p, g = _np(pred_probs), _np(gt)
    if p.shape != g.shape:
        raise ValueError(f"compute_iou: shape mismatch {p.shape} vs {g.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    pb = p > threshold
    gb = g > 0.5
    if mask is not None:
        m = np.broadcast_to(np.expand_dims(_np(mask).astype(bool), -3), pb.shape)
        pb = pb & m
        gb = gb & m
    n_cls = p.shape[-3]
    pb = np.moveaxis(pb, -3, 0).reshape(n_cls, -1)
    gb = np.moveaxis(gb, -3, 0).reshape(n_cls, -1)
    inter = (pb & gb).sum(axis=1).astype(np.int64)
    union = (pb | gb).sum(axis=1).astype(np.int64)
    return inter, union


def table_from_counts(inter, union, classes=CLASSES, stratum: str = "all") -> IouTable:
    vals = {}
    for c, name in enumerate(classes):
        vals[name] = 1.0 if union[c] == 0 else float(inter[c]) / float(union[c])
    return IouTable(vals, stratum)


def compute_iou(pred_probs, gt, threshold: float = 0.5, classes=CLASSES) -> IouTable:
    """Global-count IoU per class over every leading axis."""
    inter, union = iou_counts(pred_probs, gt, threshold)
    if len(classes) != len(inter):
        raise ValueError(f"{len(classes)} class names for {len(inter)} channels")
    return table_from_counts(inter, union, classes)


# --- stratified evaluation ---------------------------------------------------------


def _predictions(source, bundles: list[SceneBundle], rig, spec=None) -> np.ndarray:
    """(S, 3, X, Y) probabilities from a probability array, a model or a checkpoint."""
    if isinstance(source, (np.ndarray, torch.Tensor)):
        return _np(source)
    from . import training

    model = source
    if isinstance(source, (str, Path)):
        model = training.load_bev_model(source)
    data = training.TensorData.from_bundles(bundles, rig, spec)
    return training.predict(model, data).numpy()


def stratum_masks(bundle: SceneBundle, spec, vis_threshold: float = VIS_THRESHOLD,
                  include_invisible: bool = True) -> dict[str, np.ndarray]:
    """Boolean (X, Y) masks of the cells that count for each stratum.

    Cells of objects outside a stratum are removed; drivable-only and empty
    cells stay in both.
    """
    vis = bundle.visibility
    if vis is None or len(vis) != len(bundle.scene.objects):
        raise ValueError(f"scene {bundle.scene_id}: missing per-object visibility")
    inst = object_instance_map(bundle.scene, spec)
    high_ids = [k for k, v in enumerate(vis) if v >= vis_threshold]
    low_ids = [k for k, v in enumerate(vis) if v < vis_threshold and (include_invisible or v > 0)]
    is_obj = inst >= 0
    return {
        "high": ~is_obj | np.isin(inst, high_ids),
        "low": ~is_obj | np.isin(inst, low_ids),
    }


def stratified_eval(source, bundles: list[SceneBundle], rig=None, spec=None,
                    vis_threshold: float = VIS_THRESHOLD, threshold: float = 0.5,
                    include_invisible: bool = True) -> tuple[IouTable, IouTable]:
    """Object-class IoU on high- and low-visibility objects separately.

    ``source`` is a probability array (S, 3, X, Y), a ``BevModel`` or a path
    to a VT checkpoint.  Returns ``(high, low)``; drivable is not reported.
    """
    from .geometry import GridSpec

    if not bundles:
        raise ValueError("stratified_eval: no scenes")
    if spec is None:
        nx, ny = bundles[0].bev.shape[:2]
        spec = GridSpec(nx, ny)
    probs = _predictions(source, bundles, rig, spec)
    obj_idx = [CLASSES.index(c) for c in OBJECT_CLASSES]
    totals = {k: [np.zeros(len(obj_idx), np.int64), np.zeros(len(obj_idx), np.int64)]
              for k in ("high", "low")}
    for k in np.argsort([b.scene_id for b in bundles], kind="stable"):
        b = bundles[k]
        gt = np.moveaxis(b.bev, -1, 0)[obj_idx]
        pr = probs[k][obj_idx]
        for name, mask in stratum_masks(b, spec, vis_threshold, include_invisible).items():
            inter, union = iou_counts(pr, gt, threshold, mask)
            totals[name][0] += inter
            totals[name][1] += union
    labels = {"high": f">={vis_threshold:.0%}", "low": f"<{vis_threshold:.0%}"}
    return tuple(
        table_from_counts(totals[n][0], totals[n][1], OBJECT_CLASSES, labels[n]) for n in ("high", "low")
    )


# --- ablation matrix -------------------------------------------------------------------


class AblationError(RuntimeError):
    pass


@dataclass
class AblationMatrix:
    rows: list[str]
    seeds: list[int]
    tables: dict[str, dict[int, IouTable]] = field(default_factory=dict)
    losses: dict[str, dict[int, dict]] = field(default_factory=dict)

    def mean(self, row: str) -> IouTable:
        per_seed = [self.tables[row][s] for s in self.seeds if s in self.tables.get(row, {})]
        if not per_seed:
            raise KeyError(row)
        names = list(per_seed[0].per_class)
        return IouTable({n: float(np.mean([t.per_class[n] for t in per_seed])) for n in names})

    def as_dict(self) -> dict:
        out = {"rows": self.rows, "seeds": self.seeds, "results": {}}
        for row in self.rows:
            if row not in self.tables:
                continue
            entry = {"per_seed": {str(s): t.as_dict() for s, t in self.tables[row].items()},
                     "final_loss": {str(s): v for s, v in self.losses.get(row, {}).items()}}
            if len(self.tables[row]) == len(self.seeds):
                entry["mean"] = self.mean(row).as_dict()
            out["results"][row] = entry
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=1, sort_keys=True)

    def format_table(self) -> str:
        head = f"{'row':<18}{'VCC':>5}{'Height':>8}{'Align':>7}" + "".join(
            f"{c:>12}" for c in CLASSES) + f"{'mIoU':>10}"
        lines = [head, "-" * len(head)]
        for row in self.rows:
            if row not in self.tables or len(self.tables[row]) != len(self.seeds):
                continue
            t = self.mean(row)
            flags = ROW_FLAGS.get(row, (False, False, False))
            marks = "".join(f"{('x' if f else ''):>{w}}" for f, w in zip(flags, (5, 8, 7)))
            lines.append(f"{row:<18}{marks}" + "".join(
                f"{100 * t.per_class[c]:>12.2f}" for c in CLASSES) + f"{100 * t.average:>10.2f}")
        lines.append(f"(mean over seeds {self.seeds}; IoU in percent)")
        return "\n".join(lines)


def run_ablation(base_config, train_data, val_data, seeds: list[int], ivt_ckpts: dict[str, str],
                 out_dir, rows=ABLATION_ROWS, net_config=None) -> AblationMatrix:
    """Train and evaluate every row for every seed on the same data.

    ``ivt_ckpts`` maps IVT branch ("dual", "single") to a pre-trained checkpoint.
    On any failure the finished part of the matrix is written to
    ``partial.json`` before ``AblationError`` is raised.
    """
    from dataclasses import replace

    from . import training

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    matrix = AblationMatrix(list(rows), list(seeds))
    for row in rows:
        mode = "cyclebev" if row == "cyclebev-single" else row
        branch = "single" if row == "cyclebev-single" else "dual"
        if mode not in training.MODE_PARTS:
            raise AblationError(f"unknown ablation row {row!r}")
        for seed in seeds:
            cfg = replace(base_config, mode=mode, seed=seed)
            ncfg = replace(net_config or training.default_net_config(train_data), ivt_branch=branch)
            try:
                ckpt = ivt_ckpts[branch] if mode in training.IVT_MODES else None
                record = training.train_vt(train_data, val_data, ncfg, cfg,
                                           run_dir=out_dir / f"{row}_seed{seed}", ivt_ckpt=ckpt)
            except Exception as exc:  # dump what we have, then abort
                (out_dir / "partial.json").write_text(matrix.to_json())
                raise AblationError(f"row {row} seed {seed} failed: {exc}") from exc
            matrix.tables.setdefault(row, {})[seed] = IouTable.from_dict(record.epochs[-1]["val"])
            matrix.losses.setdefault(row, {})[seed] = record.epochs[-1]["loss"]
    (out_dir / "ablation.json").write_text(matrix.to_json())
    (out_dir / "ablation.txt").write_text(matrix.format_table() + "\n")
    return matrix


# --- figures ----------------------------------------------------------------------------


def colorize(bev: np.ndarray) -> np.ndarray:
    """(3, X, Y) binary/probability map -> (X, Y, 3) RGB, later classes on top."""
    bev = np.asarray(bev)
    rgb = np.ones(bev.shape[1:] + (3,))
    for c, color in enumerate(CLASS_COLORS):
        rgb[bev[c] > 0.5] = color
    return rgb


def _savefig(fig, path: Path):
    fig.savefig(path, format="png", dpi=80, metadata={"Software": None})


def _legend(ax):
    from matplotlib.patches import Patch

    ax.legend(handles=[Patch(color=col, label=name) for name, col in zip(CLASSES, CLASS_COLORS)],
              loc="upper right", fontsize=7)


def emit_figures(source, out_dir, val_bundles: list[SceneBundle] | None = None,
                 n_panels: int = 3) -> list[Path]:
    """Write figures for a run directory or an ``AblationMatrix``; returns the written files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise PermissionError(f"cannot write figures to {out_dir}: {exc}") from exc
    written: list[Path] = []

    if isinstance(source, AblationMatrix):
        fig, ax = plt.subplots(figsize=(7, 3.5))
        rows = [r for r in source.rows if r in source.tables]
        width = 0.8 / max(len(rows), 1)
        for k, row in enumerate(rows):
            t = source.mean(row)
            ax.bar(np.arange(len(CLASSES)) + k * width, [t.per_class[c] for c in CLASSES], width, label=row)
        ax.set_xticks(np.arange(len(CLASSES)) + 0.4 - width / 2, CLASSES)
        ax.set_ylabel("IoU")
        ax.legend(fontsize=7)
        p = out_dir / "ablation_iou.png"
        _savefig(fig, p)
        plt.close(fig)
        written.append(p)
        p = out_dir / "ablation.txt"
        p.write_text(source.format_table() + "\n")
        written.append(p)
        return written

    from . import training

    record = training.RunRecord.load(source)
    # config panel, always
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.axis("off")
    text = "\n".join(f"{k}: {v}" for k, v in sorted(_flatten(record.config).items()))
    ax.text(0.0, 1.0, text, va="top", family="monospace", fontsize=6)
    p = out_dir / "config.png"
    _savefig(fig, p)
    plt.close(fig)
    written.append(p)
    if not record.epochs:
        return written

    epochs = [e["epoch"] + 1 for e in record.epochs]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    keys = [k for k in record.epochs[0]["loss"] if k not in ("absent",) and
            isinstance(record.epochs[0]["loss"][k], (int, float))]
    for k in sorted(keys):
        vals = [e["loss"][k] for e in record.epochs]
        if any(vals):
            ax.plot(epochs, vals, marker="o", ms=3, label=k)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    p = out_dir / "loss_curves.png"
    _savefig(fig, p)
    plt.close(fig)
    written.append(p)

    last = record.epochs[-1].get("val")
    if last:
        t = IouTable.from_dict(last)
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar(list(t.per_class), list(t.per_class.values()), color=CLASS_COLORS[:len(t.per_class)])
        ax.set_ylim(0, 1)
        ax.set_title(f"val IoU (mean {t.average:.3f})")
        p = out_dir / "iou_bars.png"
        _savefig(fig, p)
        plt.close(fig)
        written.append(p)

    if val_bundles and record.checkpoints:
        model = training.load_bev_model(record.checkpoints[-1])
        rig = training.rig_from_config(record.config)
        subset = val_bundles[:n_panels]
        data = training.TensorData.from_bundles(subset, rig)
        probs = training.predict(model, data).numpy()
        fig, axes = plt.subplots(len(subset), 2, figsize=(5, 2.5 * len(subset)), squeeze=False)
        for k, b in enumerate(subset):
            axes[k, 0].imshow(colorize(np.moveaxis(b.bev, -1, 0)), origin="lower")
            axes[k, 1].imshow(colorize(probs[k]), origin="lower")
            axes[k, 0].set_title("GT", fontsize=8)
            axes[k, 1].set_title("prediction", fontsize=8)
            for a in axes[k]:
                a.set_xticks([])
                a.set_yticks([])
        _legend(axes[0, 1])
        p = out_dir / "bev_panels.png"
        _savefig(fig, p)
        plt.close(fig)
        written.append(p)
    return written


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out

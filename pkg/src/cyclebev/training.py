"""Training protocols: IVT pre-training, joint VT training in every mode, and
the auto-encoder baseline.

All randomness is derived from the run seed: model initialisation from
``seed``, batch order from ``(seed, epoch)``, noise and augmentation from
``(seed, epoch, step)``.  Nothing depends on wall-clock or global RNG state,
so a resumed run follows the uninterrupted trajectory.
"""

from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import eval_report
from . import nets
from .checkpoint import (ConfigMismatchError, config_hash, load_checkpoint, load_module, module_tensors,
                         optimizer_tensors, restore_optimizer, save_checkpoint)
from .geometry import CameraRig, GridSpec, rig_tensors
from .losses import (LossWeights, align_loss, cycle_loss, feature_cycle_loss, height_loss,
                     overall_loss, weighted_bce)
from .scene_synth import AugmentConfig, SceneBundle, augment

log = logging.getLogger(__name__)

MODES = ("ivt_pretrain", "bce_only", "cyclebev", "ae_guidance", "feature_cycle", "vcc_only", "vcc_height")
MODE_PARTS = {
    "ivt_pretrain": ("bce2",),
    "bce_only": ("bce1",),
    "vcc_only": ("bce1", "cycle", "bce2"),
    "vcc_height": ("bce1", "height", "cycle", "bce2"),
    "cyclebev": ("bce1", "height", "align", "cycle", "bce2"),
    "ae_guidance": ("bce1", "align"),
    "feature_cycle": ("bce1", "feature_cycle"),
}
IVT_MODES = ("cyclebev", "vcc_only", "vcc_height")
DEFAULT_LR = {"ivt_pretrain": 4e-4, "autoencoder": 5e-4}
JOINT_LR = 2e-4
STAGE_IVT = "ivt_pretrained"
STAGE_JOINT = "joint"
STAGE_FROZEN = "frozen"


class PreconditionError(ValueError):
    """A required input (checkpoint, dataset field) is missing or inconsistent."""


@dataclass
class TrainConfig:
    mode: str = "cyclebev"
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float | None = None  # None: per-stage default
    weight_decay: float = 1e-2
    seed: int = 0
    noise_std: float = 0.1
    mix_ratio: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    augment: bool = False
    grad_clip: float = 5.0
    ivt_trainable: bool = True
    eval_threshold: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")

    def lr(self, stage: str | None = None) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return DEFAULT_LR.get(stage or self.mode, JOINT_LR)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"]["class_weights"] = list(self.weights.class_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        w = dict(d.pop("weights", {}))
        if "class_weights" in w:
            w["class_weights"] = tuple(w["class_weights"])
        return cls(weights=LossWeights(**w), **d)


@contextmanager
def deterministic_mode(on: bool = True):
    """Reproducible kernels and a single intra-op thread while active."""
    prev_alg = torch.are_deterministic_algorithms_enabled()
    prev_threads = torch.get_num_threads()
    if on:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev_alg)
        torch.set_num_threads(prev_threads)


# --- data --------------------------------------------------------------------------


@dataclass
class TensorData:
    """Dataset bundles stacked into tensors (camera parameters in float64)."""

    images: torch.Tensor  # (S, N, 3, H, W) float32
    sem: torch.Tensor  # (S, 3, X, Y) float32
    height: torch.Tensor  # (S, 1, X, Y) float32
    pv: torch.Tensor  # (S, N, 3, H, W) uint8
    K: torch.Tensor
    R: torch.Tensor
    T: torch.Tensor
    rig: CameraRig
    ids: list[str]
    grid: GridSpec | None = None

    @classmethod
    def from_bundles(cls, bundles: list[SceneBundle], rig: CameraRig, grid: GridSpec | None = None) -> "TensorData":
        if not bundles:
            raise PreconditionError("empty dataset")
        for b in bundles:
            if b.bev is None or b.height is None or b.pv is None:
                raise PreconditionError(f"scene {b.scene_id}: missing ground truth")
        K, R, T = (torch.from_numpy(a) for a in rig_tensors([rig] * len(bundles)))
        return cls(
            images=torch.from_numpy(np.stack([b.images for b in bundles])).permute(0, 1, 4, 2, 3).contiguous(),
            sem=torch.from_numpy(np.stack([b.bev for b in bundles])).permute(0, 3, 1, 2).float().contiguous(),
            height=torch.from_numpy(np.stack([b.height for b in bundles])).permute(0, 3, 1, 2).contiguous(),
            pv=torch.from_numpy(np.stack([b.pv for b in bundles])).permute(0, 1, 4, 2, 3).contiguous(),
            K=K, R=R, T=T, rig=rig, ids=[b.scene_id for b in bundles], grid=grid,
        )

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, idx) -> dict:
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return {
            "images": self.images[idx], "sem": self.sem[idx], "height": self.height[idx],
            "pv": self.pv[idx].float(), "K": self.K[idx], "R": self.R[idx], "T": self.T[idx],
        }


def default_net_config(data: TensorData, **overrides) -> nets.NetConfig:
    nx, ny = data.sem.shape[-2:]
    h, w = data.images.shape[-2:]
    grid = data.grid if data.grid is not None else GridSpec(nx, ny)
    if (grid.nx, grid.ny) != (nx, ny):
        raise ConfigMismatchError(f"grid {grid.nx}x{grid.ny} does not match labels {nx}x{ny}")
    base = dict(grid=grid, image_size=(h, w), n_cams=data.images.shape[1])
    base.update(overrides)
    return nets.NetConfig(**base)


def batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[k:k + batch_size] for k in range(0, n, batch_size)]


def step_rng(seed: int, epoch: int, step: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, step, tag])


def augment_batch(b: dict, rig: CameraRig, seed: int, epoch: int, step: int) -> dict:
    """Per-sample image augmentation with matching camera updates (VT input only)."""
    imgs, ks, rs, ts = [], [], [], []
    for k in range(b["images"].shape[0]):
        sample_seed = int(step_rng(seed, epoch, step, 100 + k).integers(2**31))
        arr = b["images"][k].permute(0, 2, 3, 1).numpy()
        out, new_rig = augment(arr, rig, sample_seed, AugmentConfig())
        imgs.append(torch.from_numpy(out).permute(0, 3, 1, 2))
        K, R, T = new_rig.stacked()
        ks.append(torch.from_numpy(K))
        rs.append(torch.from_numpy(R))
        ts.append(torch.from_numpy(T))
    b = dict(b)
    b["vt_images"] = torch.stack(imgs).contiguous()
    b["vt_K"], b["vt_R"], b["vt_T"] = torch.stack(ks), torch.stack(rs), torch.stack(ts)
    return b


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


def _set_lr(opt, lr: float):
    for g in opt.param_groups:
        g["lr"] = lr


def _check_finite(value: torch.Tensor, step: int, what: str):
    if not torch.isfinite(value).all():
        raise FloatingPointError(f"non-finite {what} loss at step {step}")


@contextmanager
def frozen(*modules: nn.Module):
    """Temporarily stop gradient bookkeeping for ``modules``' parameters."""
    params = [p for m in modules if m is not None for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)


# --- inference helpers -------------------------------------------------------------


@torch.no_grad()
def predict(model: nets.BevModel, data: TensorData, batch_size: int = 8) -> torch.Tensor:
    model.eval()
    outs = []
    for k in range(0, len(data), batch_size):
        b = data.batch(np.arange(k, min(k + batch_size, len(data))))
        outs.append(model.predict(b["images"], b["K"], b["R"], b["T"]))
    model.train()
    return torch.cat(outs)


@torch.no_grad()
def predict_pv(ivt: nets.IvtNet, data: TensorData, batch_size: int = 8) -> torch.Tensor:
    outs = []
    for k in range(0, len(data), batch_size):
        b = data.batch(np.arange(k, min(k + batch_size, len(data))))
        logits, _ = ivt(nets.bev_input(b["height"], b["sem"]), b["K"], b["R"], b["T"])
        outs.append(torch.sigmoid(logits))
    return torch.cat(outs)


def evaluate_vt(model, data: TensorData, threshold: float = 0.5) -> eval_report.IouTable:
    return eval_report.compute_iou(predict(model, data), data.sem, threshold)


def evaluate_ivt(ivt, data: TensorData, threshold: float = 0.5) -> eval_report.IouTable:
    return eval_report.compute_iou(predict_pv(ivt, data), data.pv, threshold)


# --- checkpoints -------------------------------------------------------------------


def _manifest(stage: str, part: str, net_cfg: nets.NetConfig, step: int, epoch: int, extra=None) -> dict:
    m = {"stage": stage, "config_hash": config_hash(net_cfg.arch_dict(part)), "part": part,
         "net_config": net_cfg.to_dict(), "step": step, "epoch": epoch}
    if extra:
        m.update(extra)
    return m


def load_guide(path, kind: str, net_cfg: nets.NetConfig | None = None
               ) -> tuple[nn.Module, nets.FpnNeck, dict]:
    """Load an IVT (``kind="ivt"``) or auto-encoder (``"ae"``) checkpoint with its FPN."""
    if path is None or not Path(path).exists():
        raise PreconditionError(f"missing {kind} checkpoint: {path}")
    tensors, manifest = load_checkpoint(path)
    if manifest.get("part") != kind:
        raise PreconditionError(f"{path}: expected an {kind} checkpoint, got part {manifest.get('part')!r} "
                                f"at stage {manifest.get('stage')!r}")
    saved = nets.NetConfig.from_dict(manifest["net_config"])
    if net_cfg is not None:
        expected = config_hash(net_cfg.arch_dict(kind))
        if manifest.get("config_hash") != expected:
            raise ConfigMismatchError(f"{path}: checkpoint architecture does not match the run config")
    model = nets.IvtNet(saved) if kind == "ivt" else nets.BevAutoencoder(saved)
    load_module(kind, model, tensors)
    fpn = nets.FpnNeck(saved.dim)
    load_module("fpn", fpn, tensors)
    return model, fpn, manifest


def load_bev_model(path) -> nets.BevModel:
    """VT model for inference: backbone, VT and decoder only."""
    tensors, manifest = load_checkpoint(path)
    cfg = nets.NetConfig.from_dict(manifest["net_config"])
    if manifest.get("config_hash") != config_hash(cfg.arch_dict("vt")):
        from .checkpoint import ConfigMismatchError
        raise ConfigMismatchError(f"{path}: architecture hash mismatch")
    model = nets.BevModel(cfg)
    load_module("vt", model, tensors)
    model.eval()
    return model


def rig_from_config(config: dict) -> CameraRig:
    return CameraRig.from_json(json.dumps(config["rig"]))


# --- run records -------------------------------------------------------------------


@dataclass
class RunRecord:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    run_dir: str | None = None

    def append(self, entry: dict, ckpt: str | None):
        self.epochs.append(entry)
        if ckpt:
            self.checkpoints.append(ckpt)
        if self.run_dir:
            with open(Path(self.run_dir) / "log.jsonl", "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    @classmethod
    def load(cls, run_dir) -> "RunRecord":
        run_dir = Path(run_dir)
        cfg_path = run_dir / "config.json"
        if not cfg_path.exists():
            raise FileNotFoundError(f"not a run directory (no config.json): {run_dir}")
        config = json.loads(cfg_path.read_text())
        epochs = []
        log_path = run_dir / "log.jsonl"
        if log_path.exists():
            epochs = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
        ckpts = [str(run_dir / f"ckpt_epoch{e['epoch']:03d}.bin") for e in epochs
                 if (run_dir / f"ckpt_epoch{e['epoch']:03d}.bin").exists()]
        return cls(config, epochs, ckpts, str(run_dir))


def _start_run(run_dir, config: dict, resume: bool) -> tuple[RunRecord, int]:
    """Create or reopen a run directory; returns the record and the first epoch to run."""
    if run_dir is None:
        return RunRecord(config), 0
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if resume and (run_dir / "config.json").exists():
        old = json.loads((run_dir / "config.json").read_text())
        if old != config:
            raise PreconditionError(f"{run_dir}: config differs from the run being resumed")
        record = RunRecord.load(run_dir)
        # keep only epochs that have a checkpoint
        done = len(record.checkpoints)
        record.epochs = record.epochs[:done]
        (run_dir / "log.jsonl").write_text(
            "".join(json.dumps(e, sort_keys=True) + "\n" for e in record.epochs))
        return record, done
    (run_dir / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True))
    (run_dir / "log.jsonl").write_text("")
    for old in run_dir.glob("ckpt_*.bin"):
        old.unlink()
    return RunRecord(config, run_dir=str(run_dir)), 0


def _mean_reports(reports: list[dict]) -> dict:
    keys = [k for k in reports[0] if k != "absent"]
    out = {k: float(np.mean([r[k] for r in reports])) for k in keys}
    out["absent"] = reports[0]["absent"]
    return out


# --- IVT pre-training ----------------------------------------------------------------


@dataclass
class StageResult:
    checkpoint: str | None
    losses: list[float]
    initial_loss: float | None = None
    val: dict | None = None


def pretrain_ivt(data: TensorData, net_cfg: nets.NetConfig, cfg: TrainConfig, out_path=None,
                 val: TensorData | None = None) -> StageResult:
    """Train the IVT on (GT [H;O], GT PV maps) pairs with the cycle-style BCE."""
    ivt = nets.build("ivt", net_cfg, cfg.seed)
    fpn = nets.build("fpn", net_cfg, cfg.seed + 1)
    opt = torch.optim.AdamW(ivt.parameters(), lr=cfg.lr("ivt_pretrain"), weight_decay=cfg.weight_decay)
    cw = cfg.weights.class_weights
    per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.epochs * per_epoch
    losses, step = [], 0
    for epoch in range(cfg.epochs):
        acc = []
        for idx in batches(len(data), cfg.batch_size, cfg.seed, epoch):
            b = data.batch(idx)
            _set_lr(opt, cosine_lr(cfg.lr("ivt_pretrain"), step, total))
            logits, _ = ivt(nets.bev_input(b["height"], b["sem"]), b["K"], b["R"], b["T"])
            loss = cycle_loss(b["pv"], logits, cw)
            _check_finite(loss, step, "bce2")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            nn.utils.clip_grad_norm_(ivt.parameters(), cfg.grad_clip)
            opt.step()
            acc.append(float(loss.detach()))
            step += 1
        losses.append(float(np.mean(acc)))
        log.info("ivt epoch %d loss %.5f", epoch, losses[-1])
    result = StageResult(None, losses)
    if val is not None:
        result.val = evaluate_ivt(ivt, val, cfg.eval_threshold).as_dict()
    if out_path is not None:
        tensors = {**module_tensors("ivt", ivt), **module_tensors("fpn", fpn)}
        manifest = _manifest(STAGE_IVT, "ivt", net_cfg, step, cfg.epochs,
                             {"losses": losses, "train_config": cfg.to_dict()})
        result.checkpoint = str(save_checkpoint(out_path, tensors, manifest))
    return result


# --- auto-encoder baseline ------------------------------------------------------------


def autoencoder_loss(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Reconstruction BCE on the semantic channels plus MSE on the height channel."""
    n_cls = target.shape[1] - 1
    return (weighted_bce(recon[:, 1:], target[:, 1:], (1.0,) * n_cls)
            + height_loss(target[:, :1], recon[:, :1]))


def train_autoencoder(data: TensorData, net_cfg: nets.NetConfig, cfg: TrainConfig, out_path=None
                      ) -> StageResult:
    ae = nets.build("ae", net_cfg, cfg.seed)
    fpn = nets.build("fpn", net_cfg, cfg.seed + 1)
    lr = cfg.lr("autoencoder")
    opt = torch.optim.AdamW(ae.parameters(), lr=lr, weight_decay=cfg.weight_decay)
    per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.epochs * per_epoch
    with torch.no_grad():
        x = nets.bev_input(data.height, data.sem)
        initial = float(autoencoder_loss(ae(x)[0], x))
    losses, step = [], 0
    for epoch in range(cfg.epochs):
        acc = []
        for idx in batches(len(data), cfg.batch_size, cfg.seed, epoch):
            b = data.batch(idx)
            x = nets.bev_input(b["height"], b["sem"])
            _set_lr(opt, cosine_lr(lr, step, total))
            noise_seed = int(step_rng(cfg.seed, epoch, step, 7).integers(2**31))
            recon, _ = ae(x, noise_seed=noise_seed)
            loss = autoencoder_loss(recon, x)
            _check_finite(loss, step, "reconstruction")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            nn.utils.clip_grad_norm_(ae.parameters(), cfg.grad_clip)
            opt.step()
            acc.append(float(loss.detach()))
            step += 1
        losses.append(float(np.mean(acc)))
    result = StageResult(None, losses, initial_loss=initial)
    if out_path is not None:
        tensors = {**module_tensors("ae", ae), **module_tensors("fpn", fpn)}
        manifest = _manifest(STAGE_FROZEN, "ae", net_cfg, step, cfg.epochs,
                             {"losses": losses, "initial_loss": initial, "train_config": cfg.to_dict()})
        result.checkpoint = str(save_checkpoint(out_path, tensors, manifest))
    return result


# --- joint / baseline VT training -------------------------------------------------------


class _Run:
    """Modules and optimizers of one VT training run."""

    def __init__(self, net_cfg: nets.NetConfig, cfg: TrainConfig, ivt_ckpt, ae_ckpt):
        mode = cfg.mode
        self.cfg, self.net_cfg = cfg, net_cfg
        self.parts = MODE_PARTS[mode]
        # the VT is always built first so every mode starts from the same weights
        self.vt = nets.build("bev", net_cfg, cfg.seed)
        self.ivt = self.ae = self.fpn = self.recon = None
        self.guide_trainable = False
        if mode in IVT_MODES:
            if ivt_ckpt is None:
                raise PreconditionError(f"mode {mode} requires an IVT checkpoint (--ivt-ckpt)")
            self.ivt, self.fpn, man = load_guide(ivt_ckpt, "ivt", net_cfg)
            if man.get("stage") != STAGE_IVT:
                raise PreconditionError(f"{ivt_ckpt}: expected a {STAGE_IVT} checkpoint, got {man.get('stage')}")
            self.guide_trainable = cfg.ivt_trainable
        elif mode == "ae_guidance":
            if ae_ckpt is None:
                raise PreconditionError("mode ae_guidance requires an auto-encoder checkpoint (--ae-ckpt)")
            self.ae, self.fpn, _ = load_guide(ae_ckpt, "ae", net_cfg)
        elif mode == "feature_cycle":
            self.recon = nets.build("feat_recon", net_cfg, cfg.seed + 1)
        for m in (self.ivt, self.ae, self.fpn):
            if m is not None and not self.guide_trainable:
                m.requires_grad_(False)
        vt_params = list(self.vt.parameters())
        if self.recon is not None:
            vt_params += list(self.recon.parameters())
        self.vt_params = vt_params
        lr = cfg.lr()
        self.opt = torch.optim.AdamW(vt_params, lr=lr, weight_decay=cfg.weight_decay)
        self.opt_guide = None
        if self.guide_trainable:
            self.guide_params = list(self.ivt.parameters()) + list(self.fpn.parameters())
            self.opt_guide = torch.optim.AdamW(self.guide_params, lr=lr, weight_decay=cfg.weight_decay)

    def modules(self) -> dict[str, nn.Module]:
        mods = {"vt": self.vt, "ivt": self.ivt, "ae": self.ae, "fpn": self.fpn, "recon": self.recon}
        return {k: v for k, v in mods.items() if v is not None}

    def optimizers(self) -> dict:
        opts = {"opt": self.opt, "opt_guide": self.opt_guide}
        return {k: v for k, v in opts.items() if v is not None}

    def guide_features(self, gt_in: torch.Tensor, bev_hw) -> torch.Tensor:
        mr = self.ivt.encoder(gt_in) if self.ivt is not None else self.ae(gt_in)[1]
        return self.fpn(mr, bev_hw)

    def step(self, b: dict, seed: int, epoch: int, step: int, lr: float) -> dict:
        cfg, parts_req = self.cfg, self.parts
        w = cfg.weights
        cw = w.class_weights
        _set_lr(self.opt, lr)
        gt_in = nets.bev_input(b["height"], b["sem"])
        images = b.get("vt_images", b["images"])
        K, R, T = (b.get("vt_" + k, b[k]) for k in ("K", "R", "T"))
        out = self.vt(images, K, R, T)
        bev_hw = out["bev"].shape[-2:]
        parts: dict[str, torch.Tensor] = {"bce1": weighted_bce(out["logits"], b["sem"], cw)}
        if "height" in parts_req:
            parts["height"] = height_loss(b["height"], out["height"])
        if "align" in parts_req:
            with torch.no_grad():
                target = self.guide_features(gt_in, bev_hw)
            parts["align"] = align_loss(out["bev"], target, detach_target=True)
        pred_in = None
        if "cycle" in parts_req:
            pred_in = nets.bev_input(out["height"], torch.sigmoid(out["logits"]))
            # the cycle term trains the VT only; the IVT is a fixed map here
            with frozen(self.ivt):
                pv_logits, _ = self.ivt(pred_in, b["K"], b["R"], b["T"])
            parts["cycle"] = cycle_loss(b["pv"], pv_logits, cw)
        if "feature_cycle" in parts_req:
            rec = self.recon(out["bev"], K, R, T)
            parts["feature_cycle"] = feature_cycle_loss(out["feats"], rec)
        try:
            vt_report = overall_loss(parts, w)
        except FloatingPointError as e:
            raise FloatingPointError(f"{e} at step {step}") from None
        _check_finite(vt_report.total, step, "VT")
        self.opt.zero_grad(set_to_none=True)
        vt_report.total.backward()
        nn.utils.clip_grad_norm_(self.vt_params, cfg.grad_clip)
        self.opt.step()

        if "bce2" in parts_req:
            parts["bce2"] = self._refresh(b, gt_in, pred_in, out["bev"], seed, epoch, step, lr)
        report = overall_loss({k: v.detach() for k, v in parts.items()}, w)
        return report.as_dict()

    def _refresh(self, b, gt_in, pred_in, bev, seed, epoch, step, lr) -> torch.Tensor:
        """IVT pass on a mix of noised GT and detached VT predictions."""
        cfg = self.cfg
        rng = step_rng(seed, epoch, step, 1)
        n = gt_in.shape[0]
        use_gt = torch.from_numpy(rng.random(n) < cfg.mix_ratio)
        noise = torch.from_numpy(rng.standard_normal(tuple(gt_in.shape))).to(gt_in.dtype)
        inp = torch.where(use_gt[:, None, None, None], gt_in + cfg.noise_std * noise, pred_in.detach())
        if not self.guide_trainable:
            with torch.no_grad():
                logits, _ = self.ivt(inp, b["K"], b["R"], b["T"])
                return cycle_loss(b["pv"], logits, cfg.weights.class_weights)
        _set_lr(self.opt_guide, lr)
        logits, _ = self.ivt(inp, b["K"], b["R"], b["T"])
        bce2 = cycle_loss(b["pv"], logits, cfg.weights.class_weights)
        loss = cfg.weights.lambda4 * bce2
        if "align" in self.parts:
            # align also pulls the guide towards the VT features
            target = self.guide_features(gt_in, bev.shape[-2:])
            loss = loss + cfg.weights.lambda2 * align_loss(bev.detach(), target, detach_target=False)
        _check_finite(loss, step, "bce2")
        self.opt_guide.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(self.guide_params, cfg.grad_clip)
        self.opt_guide.step()
        return bce2.detach()

    def save(self, path, step: int, epoch: int) -> str:
        tensors, opt_meta = {}, {}
        for name, m in self.modules().items():
            tensors.update(module_tensors(name, m))
        for name, opt in self.optimizers().items():
            t, meta = optimizer_tensors(name, opt)
            tensors.update(t)
            opt_meta[name] = meta
        stage = STAGE_JOINT if self.guide_trainable else STAGE_FROZEN
        manifest = _manifest(stage, "vt", self.net_cfg, step, epoch,
                             {"mode": self.cfg.mode, "optimizers": opt_meta})
        return str(save_checkpoint(path, tensors, manifest))

    def restore(self, path) -> int:
        tensors, manifest = load_checkpoint(path, config_hash(self.net_cfg.arch_dict("vt")))
        for name, m in self.modules().items():
            load_module(name, m, tensors)
        for name, opt in self.optimizers().items():
            restore_optimizer(name, opt, tensors, manifest["optimizers"][name])
        return int(manifest["step"])


def run_config(net_cfg: nets.NetConfig, cfg: TrainConfig, rig: CameraRig, ivt_ckpt=None, ae_ckpt=None,
               extra: dict | None = None) -> dict:
    return {
        "train": cfg.to_dict(), "net": net_cfg.to_dict(), "rig": json.loads(rig.to_json()),
        "ivt_ckpt": str(ivt_ckpt) if ivt_ckpt else None, "ae_ckpt": str(ae_ckpt) if ae_ckpt else None,
        **(extra or {}),
    }


def train_vt(data: TensorData, val: TensorData | None, net_cfg: nets.NetConfig, cfg: TrainConfig,
             run_dir=None, ivt_ckpt=None, ae_ckpt=None, resume: bool = False,
             stop_after: int | None = None, extra_config: dict | None = None) -> RunRecord:
    """Train a VT model in ``cfg.mode``; one log line and one checkpoint per epoch.

    ``stop_after`` ends the call after that many epochs in total (used to
    simulate an interruption); ``resume`` continues from the last checkpoint
    in ``run_dir``.
    """
    if cfg.mode == "ivt_pretrain":
        raise PreconditionError("use pretrain_ivt for the ivt_pretrain mode")
    if net_cfg.vt_variant not in nets.VT_VARIANTS:
        raise ValueError(f"unknown vt_variant {net_cfg.vt_variant!r}")
    run = _Run(net_cfg, cfg, ivt_ckpt, ae_ckpt)
    config = run_config(net_cfg, cfg, data.rig, ivt_ckpt, ae_ckpt, extra_config)
    record, start = _start_run(run_dir, config, resume)
    per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.epochs * per_epoch
    step = 0
    if start > 0:
        step = run.restore(record.checkpoints[-1])
    for epoch in range(start, cfg.epochs):
        if stop_after is not None and epoch >= stop_after:
            break
        reports = []
        for idx in batches(len(data), cfg.batch_size, cfg.seed, epoch):
            b = data.batch(idx)
            if cfg.augment:
                b = augment_batch(b, data.rig, cfg.seed, epoch, step)
            reports.append(run.step(b, cfg.seed, epoch, step, cosine_lr(cfg.lr(), step, total)))
            step += 1
        entry = {"epoch": epoch, "step": step, "loss": _mean_reports(reports)}
        if val is not None:
            entry["val"] = evaluate_vt(run.vt, val, cfg.eval_threshold).as_dict()
        ckpt = None
        if run_dir is not None:
            ckpt = run.save(Path(run_dir) / f"ckpt_epoch{epoch:03d}.bin", step, epoch)
        record.append(entry, ckpt)
        log.info("%s epoch %d %s", cfg.mode, epoch, json.dumps(entry))
    record.final_model = run.vt  # not serialized; convenient for callers
    return record


# --- inference-cost probe ------------------------------------------------------------------


def count_module_calls(model: nn.Module, fn, watch: dict[str, nn.Module]) -> dict[str, int]:
    """Run ``fn()`` and count forward calls of each watched module (and its children)."""
    counts = {name: 0 for name in watch}
    handles = []
    for name, mod in watch.items():
        for sub in mod.modules():
            def hook(_m, _i, _o, name=name):
                counts[name] += 1
            handles.append(sub.register_forward_hook(hook))
    try:
        fn()
    finally:
        for h in handles:
            h.remove()
    return counts


def count_ops(fn) -> int:
    """Number of tensor operations dispatched while running ``fn()``."""
    from torch.utils._python_dispatch import TorchDispatchMode

    class _Counter(TorchDispatchMode):
        n = 0

        def __torch_dispatch__(self, func, types, args=(), kwargs=None):
            _Counter.n += 1
            return func(*args, **(kwargs or {}))

    with _Counter():
        fn()
    return _Counter.n

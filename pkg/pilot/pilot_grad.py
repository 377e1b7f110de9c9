"""Pilot: gradient scale of each cyclebev term relative to the supervised BCE.

Trains a bce_only lift-splat VT on the pilot dataset, then measures on
training batches the VT-parameter gradient norm of every weighted term at
the default weights, and the cosine of each with the BCE gradient.  Run from
the repo root: ``python pilot/pilot_grad.py [epochs]``.  Writes
``pilot/records/grad_scale.json``.
"""

import json
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from cyclebev import experiments as acc
from cyclebev import nets, training
from cyclebev.losses import align_loss, cycle_loss, height_loss, weighted_bce

torch.set_num_threads(1)
out = Path(__file__).parent / "records"
out.mkdir(exist_ok=True)
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
train, val = acc.datasets(acc.PILOT_DATA_SEED)
ncfg = acc.replace(acc.net_config(train), vt_variant="lift_splat")
ckpt = (acc.cache_dir() or out) / f"pilot_ivt_dual_seed{acc.PILOT_SEED}.bin"
if not ckpt.exists():
    sys.exit(f"run pilot/pilot_vt.py first to create {ckpt}")

base = training.TrainConfig(mode="bce_only", epochs=epochs, seed=acc.PILOT_SEED, learning_rate=acc.VT_LR)
with training.deterministic_mode():
    rec = training.train_vt(train, val, ncfg, base)
cfg = training.TrainConfig(mode="cyclebev", epochs=epochs, seed=acc.PILOT_SEED)
run = training._Run(ncfg, cfg, ckpt, None)
run.vt.load_state_dict(rec.final_model.state_dict())
w, cw = cfg.weights, cfg.weights.class_weights
params = list(run.vt.parameters())


def flat_grad(loss):
    g = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    return torch.cat([(x if x is not None else torch.zeros_like(p)).flatten() for x, p in zip(g, params)])


rows = []
for idx in training.batches(len(train), cfg.batch_size, acc.PILOT_SEED, 0)[:12]:
    b = train.batch(idx)
    gt_in = nets.bev_input(b["height"], b["sem"])
    o = run.vt(b["images"], b["K"], b["R"], b["T"])
    with torch.no_grad():
        target = run.guide_features(gt_in, o["bev"].shape[-2:])
    pred_in = nets.bev_input(o["height"], torch.sigmoid(o["logits"]))
    with training.frozen(run.ivt):
        pv, _ = run.ivt(pred_in, b["K"], b["R"], b["T"])
    grads = {
        "bce1": flat_grad(weighted_bce(o["logits"], b["sem"], cw)),
        "align": flat_grad(w.lambda2 * align_loss(o["bev"], target)),
        "cycle": flat_grad(w.lambda3 * cycle_loss(b["pv"], pv, cw)),
    }
    rows.append({**{f"norm_{k}": float(g.norm()) for k, g in grads.items()},
                 **{f"cos_bce1_{k}": float(F.cosine_similarity(grads["bce1"], g, dim=0))
                    for k, g in grads.items() if k != "bce1"}})
summary = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
ratio = summary["norm_cycle"] / summary["norm_bce1"]
record = {"data_seed": acc.PILOT_DATA_SEED, "seed": acc.PILOT_SEED, "bce_only_epochs": epochs,
          "val_miou_of_probe_vt": rec.epochs[-1]["val"]["average"], "default_weights": cfg.to_dict()["weights"],
          "batches": len(rows), "mean": summary, "cycle_to_bce1_norm_ratio": ratio}
(out / "grad_scale.json").write_text(json.dumps(record, indent=1, sort_keys=True))
print(json.dumps(record, indent=1))

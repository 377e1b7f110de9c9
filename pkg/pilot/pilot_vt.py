"""Pilot: direction of effect of the cycle regulariser at the acceptance configuration.

One seed on the pilot dataset (disjoint from the acceptance seeds and data),
both VT variants, bce_only against cyclebev.  Run from the repo root:
``python pilot/pilot_vt.py [epochs] [lr] [lambda3]``.  Writes
``pilot/records/vt_direction_e<epochs>_lr<lr>_l3<lambda3>.json``.
"""

import json
import sys
import time
from pathlib import Path

import torch

from cyclebev import experiments as acc
from cyclebev import training

torch.set_num_threads(1)
out = Path(__file__).parent / "records"
out.mkdir(exist_ok=True)
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else acc.VT_EPOCHS
lr = float(sys.argv[2]) if len(sys.argv) > 2 else acc.VT_LR
lambda3 = float(sys.argv[3]) if len(sys.argv) > 3 else acc.VT_LAMBDA3
t0 = time.time()
train, val = acc.datasets(acc.PILOT_DATA_SEED)
ncfg = acc.net_config(train)
ckpt = (acc.cache_dir() or out) / f"pilot_ivt_dual_seed{acc.PILOT_SEED}.bin"
if not ckpt.exists():
    cfg = training.TrainConfig(mode="ivt_pretrain", epochs=acc.IVT_EPOCHS, seed=acc.PILOT_SEED)
    with training.deterministic_mode():
        training.pretrain_ivt(train, ncfg, cfg, ckpt)
print("ivt ready", round(time.time() - t0), flush=True)
rows = {}
for variant in ("cross_attention", "lift_splat"):
    for mode in ("bce_only", "cyclebev"):
        t1 = time.time()
        cfg = acc.replace(acc.vt_config(mode, acc.PILOT_SEED, epochs, lambda3), learning_rate=lr)
        with training.deterministic_mode():
            rec = training.train_vt(train, val, acc.replace(ncfg, vt_variant=variant), cfg,
                                    ivt_ckpt=ckpt if mode == "cyclebev" else None)
        rows[f"{variant}/{mode}"] = {
            "val_per_epoch": [e["val"]["average"] for e in rec.epochs],
            "final": rec.epochs[-1]["val"],
            "train_loss": [e["loss"]["total"] for e in rec.epochs],
            "seconds": time.time() - t1,
        }
        print(variant, mode, json.dumps(rows[f"{variant}/{mode}"]), flush=True)
record = {"data_seed": acc.PILOT_DATA_SEED, "seed": acc.PILOT_SEED, "epochs": epochs,
          "learning_rate": lr, "lambda3": lambda3,
          "config": ncfg.to_dict(), "results": rows,
          "gain": {v: rows[f"{v}/cyclebev"]["final"]["average"] - rows[f"{v}/bce_only"]["final"]["average"]
                   for v in ("cross_attention", "lift_splat")}}
(out / f"vt_direction_e{epochs}_lr{lr:g}_l3{lambda3:g}.json").write_text(json.dumps(record, indent=1, sort_keys=True))
print(json.dumps(record["gain"]))

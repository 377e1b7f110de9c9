"""Pilot: IVT pre-training learnability at the acceptance configuration.

Run from the repo root: ``python pilot/pilot_ivt.py``.  Writes
``pilot/records/ivt_pretrain.json``.
"""

import json
import time
from pathlib import Path

import torch

from cyclebev import experiments as acc
from cyclebev import training

torch.set_num_threads(1)
out = Path(__file__).parent / "records"
out.mkdir(exist_ok=True)
t0 = time.time()
train, val = acc.datasets(acc.PILOT_DATA_SEED)
ncfg = acc.net_config(train)
rows = {}
for branch in ("dual", "single"):
    cfg = training.TrainConfig(mode="ivt_pretrain", epochs=acc.IVT_EPOCHS, seed=acc.PILOT_SEED)
    with training.deterministic_mode():
        res = training.pretrain_ivt(train, acc.replace(ncfg, ivt_branch=branch), cfg, val=val)
    base = acc.background_pv_miou(val)
    rows[branch] = {"losses": res.losses, "val": res.val, "background_miou": base,
                    "seconds": time.time() - t0}
    print(branch, json.dumps(rows[branch]), flush=True)
record = {"data_seed": acc.PILOT_DATA_SEED, "seed": acc.PILOT_SEED, "config": ncfg.to_dict(),
          "train_config": cfg.to_dict(), "results": rows}
(out / "ivt_pretrain.json").write_text(json.dumps(record, indent=1, sort_keys=True))

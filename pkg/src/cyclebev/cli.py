"""Command-line entry point: ``cyclebev <command> [flags]``.

Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

COMMANDS = ("gen-data", "pretrain-ivt", "train-ae", "train", "eval", "ablate", "plot", "selftest")
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("cyclebev")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cyclebev", description="View-cycle regularised BEV segmentation at desk scale.")
    p.add_argument("command", choices=COMMANDS, metavar="command", help=" | ".join(COMMANDS))
    p.add_argument("--config", help="JSON config file (flat keys)")
    p.add_argument("--seed", type=int, help="run seed (dataset seed for gen-data)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--mode", help="training mode")
    p.add_argument("--ivt-ckpt", help="pre-trained IVT checkpoint (dual branch for ablate)")
    p.add_argument("--ivt-ckpt-single", help="pre-trained single-branch IVT checkpoint (ablate)")
    p.add_argument("--ae-ckpt", help="trained auto-encoder checkpoint")
    p.add_argument("--vt", choices=("cross_attention", "lift_splat"))
    p.add_argument("--branch", choices=("dual", "single"))
    p.add_argument("--augment", choices=("on", "off"))
    p.add_argument("--deterministic", choices=("on", "off"))
    p.add_argument("--workers", type=int)
    p.add_argument("--scenes", type=int, help="number of scenes (gen-data)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--data", help="dataset directory (default: $CYCLEBEV_CACHE/data)")
    p.add_argument("--val-data", help="separate validation dataset directory")
    p.add_argument("--ckpt", help="VT checkpoint (eval)")
    p.add_argument("--run", help="run directory (plot)")
    p.add_argument("--matrix", help="ablation.json (plot)")
    p.add_argument("--resume", action="store_true", help="continue the run in --out")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _flags(args) -> dict:
    flags = {"seed": args.seed, "mode": args.mode, "vt": args.vt, "branch": args.branch,
             "augment": args.augment, "deterministic": args.deterministic, "workers": args.workers,
             "epochs": args.epochs}
    if args.command == "gen-data":
        flags["data_seed"] = args.seed
        flags["scenes"] = args.scenes
    return {k: v for k, v in flags.items() if v is not None}


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def _data_dir(args) -> Path:
    if args.data:
        return Path(args.data)
    cache = os.environ.get("CYCLEBEV_CACHE")
    if cache:
        return Path(cache) / "data"
    raise UsageError("no dataset given: pass --data DIR or set CYCLEBEV_CACHE")


def _load_split(cfg, args):
    """(train, val) TensorData from --data (trailing val_scenes) or --data/--val-data."""
    from . import dataset_io
    from .training import TensorData

    bundles, rig, spec = dataset_io.read_dataset(_data_dir(args))
    if args.val_data:
        vb, vrig, vspec = dataset_io.read_dataset(args.val_data)
        return TensorData.from_bundles(bundles, rig, spec), TensorData.from_bundles(vb, vrig, vspec)
    n_val = cfg["val_scenes"]
    if n_val >= len(bundles):
        raise UsageError(f"dataset has {len(bundles)} scenes; val_scenes={n_val} leaves none for training")
    train = TensorData.from_bundles(bundles[:len(bundles) - n_val], rig, spec)
    val = TensorData.from_bundles(bundles[len(bundles) - n_val:], rig, spec) if n_val else None
    return train, val


def cmd_gen_data(cfg, args) -> int:
    from . import dataset_io
    from .scene_synth import generate_dataset

    out = Path(args.out) if args.out else _data_dir(args)
    cfg.write(out)
    bundles = generate_dataset(cfg["scenes"], cfg["data_seed"], cfg.rig(), cfg.grid(), cfg.scene_params(),
                               workers=cfg["workers"], flip_prob=cfg["flip_prob"])
    manifest = dataset_io.write_dataset(out, bundles, cfg.rig(), cfg.grid(),
                                        extra={"data_seed": cfg["data_seed"],
                                               "scene_params": cfg.scene_params().to_dict()})
    print(f"wrote {len(manifest['scene_ids'])} scenes to {out}")
    return EXIT_OK


def cmd_pretrain_ivt(cfg, args) -> int:
    from .config import net_config_for
    from .training import pretrain_ivt

    out = _out(args, "runs/ivt")
    cfg.write(out)
    train, val = _load_split(cfg, args)
    res = pretrain_ivt(train, net_config_for(cfg, train), cfg.train_config("ivt_pretrain"),
                       out / f"ivt_{cfg['branch']}.bin", val)
    summary = {"checkpoint": res.checkpoint, "losses": res.losses, "val": res.val}
    (out / "pretrain.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_train_ae(cfg, args) -> int:
    from .config import net_config_for
    from .training import train_autoencoder

    out = _out(args, "runs/ae")
    cfg.write(out)
    train, _ = _load_split(cfg, args)
    res = train_autoencoder(train, net_config_for(cfg, train), cfg.train_config("bce_only"), out / "ae.bin")
    summary = {"checkpoint": res.checkpoint, "initial_loss": res.initial_loss, "losses": res.losses}
    (out / "train_ae.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    from .config import net_config_for
    from .training import IVT_MODES, PreconditionError, train_vt

    mode = cfg["mode"]
    if mode in IVT_MODES and not args.ivt_ckpt:
        raise PreconditionError(f"mode {mode} needs a pre-trained IVT checkpoint: pass --ivt-ckpt")
    if mode == "ae_guidance" and not args.ae_ckpt:
        raise PreconditionError("mode ae_guidance needs an auto-encoder checkpoint: pass --ae-ckpt")
    out = _out(args, f"runs/{mode}")
    if not args.resume:
        cfg.write(out)
    train, val = _load_split(cfg, args)
    rec = train_vt(train, val, net_config_for(cfg, train), cfg.train_config(), run_dir=out,
                   ivt_ckpt=args.ivt_ckpt, ae_ckpt=args.ae_ckpt, resume=args.resume)
    if rec.epochs:
        print(json.dumps(rec.epochs[-1]))
    return EXIT_OK


def cmd_eval(cfg, args) -> int:
    from . import dataset_io
    from .eval_report import compute_iou, stratified_eval
    from .training import TensorData, load_bev_model, predict

    if not args.ckpt:
        raise UsageError("eval needs --ckpt PATH")
    bundles, rig, spec = dataset_io.read_dataset(args.val_data or _data_dir(args))
    model = load_bev_model(args.ckpt)
    data = TensorData.from_bundles(bundles, rig, spec)
    probs = predict(model, data)
    table = compute_iou(probs, data.sem, cfg["threshold"])
    high, low = stratified_eval(probs.numpy(), bundles, rig, spec, cfg["vis_threshold"], cfg["threshold"],
                                cfg["include_invisible"])
    result = {"all": table.as_dict(), "high_vis": high.as_dict(), "low_vis": low.as_dict(),
              "checkpoint": str(args.ckpt), "scenes": len(bundles)}
    text = json.dumps(result, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(text)
    print(text)
    return EXIT_OK


def cmd_ablate(cfg, args) -> int:
    from dataclasses import replace

    from .config import net_config_for
    from .eval_report import emit_figures, run_ablation
    from .training import pretrain_ivt

    out = _out(args, "runs/ablate")
    cfg.write(out)
    train, val = _load_split(cfg, args)
    ncfg = net_config_for(cfg, train)
    ckpts = {"dual": args.ivt_ckpt, "single": args.ivt_ckpt_single}
    rows = cfg["rows"]
    for branch, path in ckpts.items():
        needed = any(r == "cyclebev-single" for r in rows) if branch == "single" else any(
            r in ("vcc_only", "vcc_height", "cyclebev") for r in rows)
        if needed and not path:
            log.info("pre-training the %s-branch IVT", branch)
            ckpts[branch] = pretrain_ivt(train, replace(ncfg, ivt_branch=branch),
                                         cfg.train_config("ivt_pretrain"), out / f"ivt_{branch}.bin").checkpoint
    matrix = run_ablation(cfg.train_config(), train, val, [int(s) for s in cfg["seeds"]], ckpts, out,
                          rows=rows, net_config=ncfg)
    emit_figures(matrix, out)
    print(matrix.format_table())
    return EXIT_OK


def cmd_plot(cfg, args) -> int:
    from . import dataset_io
    from .eval_report import AblationMatrix, IouTable, emit_figures

    out = _out(args, "figures")
    if args.matrix:
        d = json.loads(Path(args.matrix).read_text())
        m = AblationMatrix(d["rows"], d["seeds"])
        for row, entry in d["results"].items():
            m.tables[row] = {int(s): IouTable.from_dict(t) for s, t in entry["per_seed"].items()}
        files = emit_figures(m, out)
    elif args.run:
        val = None
        if args.val_data or args.data:
            val, _, _ = dataset_io.read_dataset(args.val_data or args.data)
        files = emit_figures(args.run, out, val)
    else:
        raise UsageError("plot needs --run DIR or --matrix FILE")
    for f in files:
        print(f)
    return EXIT_OK


def cmd_selftest(cfg, args) -> int:
    from . import selftest

    return EXIT_OK if selftest.run() else EXIT_RUNTIME


HANDLERS = {"gen-data": cmd_gen_data, "pretrain-ivt": cmd_pretrain_ivt, "train-ae": cmd_train_ae,
            "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "plot": cmd_plot,
            "selftest": cmd_selftest}


def dispatch(command: str, cfg, args) -> int:
    from .training import deterministic_mode

    if command not in HANDLERS:
        raise UsageError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    with deterministic_mode(cfg["deterministic"]):
        return HANDLERS[command](cfg, args)


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .config import ConfigError, load_config
    from .dataset_io import DatasetError
    from .training import PreconditionError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _flags(args))
        return dispatch(args.command, cfg, args)
    except (UsageError, ConfigError, PreconditionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, FloatingPointError, OSError, RuntimeError, ValueError) as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

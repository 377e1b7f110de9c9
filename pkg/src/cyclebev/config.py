"""Flat key/value run configuration.

A config file is a JSON object whose keys are a subset of ``DEFAULTS``.
Command-line flags override file values, which override defaults; every
resolved key remembers where its value came from.
"""

from __future__ import annotations

import difflib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import GridSpec, default_rig
from .losses import LossWeights
from .nets import IVT_BRANCHES, VT_VARIANTS, NetConfig
from .scene_synth import SceneParams
from .training import MODES, TrainConfig

# key -> (default, type, help)
DEFAULTS: dict[str, tuple] = {
    # BEV grid
    "nx": (100, int, "BEV cells along world x"),
    "ny": (100, int, "BEV cells along world y"),
    "extent_x": (50.0, float, "metres covered along x"),
    "extent_y": (50.0, float, "metres covered along y"),
    # camera rig
    "rig_path": (None, str, "JSON rig file; overrides the generated ring"),
    "image_height": (112, int, "image rows"),
    "image_width": (224, int, "image columns"),
    "n_cameras": (4, int, "cameras in the generated ring"),
    "mount_height": (1.6, float, "camera height above ground (m)"),
    "pitch_deg": (8.0, float, "downward camera tilt"),
    "hfov_deg": (90.0, float, "horizontal field of view"),
    # scenes
    "scenes": (250, int, "scenes written by gen-data"),
    "val_scenes": (50, int, "trailing scenes of a dataset used for validation"),
    "data_seed": (7, int, "dataset seed for gen-data (--seed also sets it)"),
    "vehicle_count": ([2, 8], list, "inclusive range of vehicles per scene"),
    "pedestrian_count": ([1, 6], list, "inclusive range of pedestrians per scene"),
    "occluded_fraction": (0.2, float, "share of objects placed in an occluder's shadow"),
    "road_family": ("any", str, "straight | cross | tjunction | any"),
    "flip_prob": (0.0, float, "PV label noise: per-pixel flip probability"),
    # networks
    "s": (2, int, "BEV feature downsampling exponent"),
    "feat_channels": (64, int, "PV feature channels"),
    "dim": (64, int, "BEV / attention width"),
    "heads": (4, int, "attention heads"),
    "vt_layers": (2, int, "VT attention layers"),
    "ivt_layers": (2, int, "IVT attention layers per branch"),
    "depth_bins": (32, int, "lift-splat depth bins"),
    "vt": ("cross_attention", str, "VT variant"),
    "branch": ("dual", str, "IVT branch layout"),
    # training
    "mode": ("cyclebev", str, "training mode"),
    "epochs": (30, int, "training epochs"),
    "batch_size": (4, int, "mini-batch size"),
    "learning_rate": (None, float, "peak learning rate (default depends on stage)"),
    "weight_decay": (1e-2, float, "decoupled weight decay"),
    "seed": (0, int, "run seed"),
    "noise_std": (0.1, float, "Gaussian noise on GT inputs during IVT fine-tuning"),
    "mix_ratio": (0.5, float, "share of IVT fine-tuning inputs taken from noised GT"),
    "lambda1": (1.0, float, "height loss weight"),
    "lambda2": (1e-3, float, "feature alignment weight"),
    "lambda3": (0.4, float, "cycle loss weight"),
    "lambda4": (1.0, float, "IVT BCE weight"),
    "class_weights": ([0.03, 0.5, 1.0], list, "BCE weights (drivable, vehicle, pedestrian)"),
    "augment": (False, bool, "image augmentation"),
    "grad_clip": (5.0, float, "global gradient-norm clip"),
    "ivt_trainable": (True, bool, "fine-tune the IVT jointly"),
    # evaluation
    "threshold": (0.5, float, "probability threshold for IoU"),
    "vis_threshold": (0.4, float, "visibility stratum boundary"),
    "include_invisible": (True, bool, "count 0%-visible objects in the low stratum"),
    "seeds": ([0, 1, 2], list, "seeds for ablate"),
    "rows": (["bce_only", "vcc_only", "vcc_height", "cyclebev", "cyclebev-single"], list,
             "ablation rows"),
    # runtime
    "deterministic": (True, bool, "reproducible kernels"),
    "workers": (1, int, "worker processes for data generation"),
}

CHOICES = {"mode": MODES, "vt": VT_VARIANTS, "branch": IVT_BRANCHES,
           "road_family": ("straight", "cross", "tjunction", "any")}


class ConfigError(ValueError):
    pass


@dataclass
class ResolvedConfig:
    values: dict
    provenance: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def snapshot(self) -> str:
        """Flat JSON of the resolved values; loading it back resolves identically."""
        return json.dumps(self.values, indent=1, sort_keys=True)

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.json").write_text(self.snapshot())
        (out / "config_provenance.json").write_text(json.dumps(self.provenance, indent=1, sort_keys=True))
        return out / "resolved_config.json"

    # --- typed views -----------------------------------------------------------

    def grid(self) -> GridSpec:
        v = self.values
        return GridSpec(v["nx"], v["ny"], v["extent_x"], v["extent_y"])

    def rig(self):
        v = self.values
        if v["rig_path"]:
            from .geometry import CameraRig

            return CameraRig.from_json(Path(v["rig_path"]).read_text())
        return default_rig(v["image_height"], v["image_width"], v["n_cameras"], v["mount_height"],
                           v["pitch_deg"], v["hfov_deg"])

    def scene_params(self) -> SceneParams:
        v = self.values
        return SceneParams(vehicle_count=tuple(v["vehicle_count"]),
                           pedestrian_count=tuple(v["pedestrian_count"]),
                           occluded_fraction=v["occluded_fraction"], road_family=v["road_family"])

    def weights(self) -> LossWeights:
        v = self.values
        return LossWeights(v["lambda1"], v["lambda2"], v["lambda3"], v["lambda4"], tuple(v["class_weights"]))

    def train_config(self, mode: str | None = None) -> TrainConfig:
        v = self.values
        return TrainConfig(mode=mode or v["mode"], epochs=v["epochs"], batch_size=v["batch_size"],
                           learning_rate=v["learning_rate"], weight_decay=v["weight_decay"], seed=v["seed"],
                           noise_std=v["noise_std"], mix_ratio=v["mix_ratio"], weights=self.weights(),
                           augment=v["augment"], grad_clip=v["grad_clip"], ivt_trainable=v["ivt_trainable"],
                           eval_threshold=v["threshold"])

    def net_overrides(self) -> dict:
        v = self.values
        return {"s": v["s"], "feat_channels": v["feat_channels"], "dim": v["dim"], "heads": v["heads"],
                "vt_layers": v["vt_layers"], "ivt_layers": v["ivt_layers"], "depth_bins": v["depth_bins"],
                "vt_variant": v["vt"], "ivt_branch": v["branch"]}


def _coerce(key: str, value, source: str):
    default, typ, _ = DEFAULTS[key]
    where = f"{key!r} (from {source})"
    if value is None:
        if default is None:
            return None
        raise ConfigError(f"{where}: null is not allowed")
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("on", "true", "1", "yes", "off", "false", "0", "no"):
            return value.lower() in ("on", "true", "1", "yes")
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if typ is int:
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if typ is float:
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if typ is list:
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                value = [x.strip() for x in value.split(",") if x.strip()]
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        if default and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in default):
            kind = int if all(isinstance(x, int) for x in default) else float
            try:
                value = [kind(x) for x in value]
            except (TypeError, ValueError):
                raise ConfigError(f"{where}: expected a list of numbers, got {value!r}") from None
        return value
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise AssertionError(typ)


def _validate(values: dict, provenance: dict):
    def fail(key, msg):
        raise ConfigError(f"{key!r} (from {provenance[key]}): {msg}")

    for key, options in CHOICES.items():
        if values[key] not in options:
            fail(key, f"must be one of {list(options)}, got {values[key]!r}")
    for key in ("nx", "ny", "image_height", "image_width", "n_cameras", "epochs", "batch_size", "scenes",
                "workers", "heads", "dim", "depth_bins"):
        minimum = 0 if key in ("epochs",) else 1
        if values[key] < minimum:
            fail(key, f"must be >= {minimum}")
    for key in ("lambda1", "lambda2", "lambda3", "lambda4", "noise_std", "weight_decay", "flip_prob",
                "val_scenes"):
        if values[key] < 0:
            fail(key, "must be nonnegative")
    for key in ("threshold", "vis_threshold"):
        if not 0.0 < values[key] < 1.0:
            fail(key, "must lie strictly between 0 and 1")
    if not 0.0 <= values["mix_ratio"] <= 1.0:
        fail("mix_ratio", "must lie in [0, 1]")
    if len(values["class_weights"]) != 3 or any(w < 0 for w in values["class_weights"]):
        fail("class_weights", "expected three nonnegative weights")
    for key in ("vehicle_count", "pedestrian_count"):
        r = values[key]
        if len(r) != 2 or r[0] < 0 or r[0] > r[1]:
            fail(key, "expected [min, max] with 0 <= min <= max")


def resolve(file_values: dict, flag_values: dict) -> ResolvedConfig:
    values, provenance = {}, {}
    for source, given in (("file", file_values), ("flag", flag_values)):
        for key in given:
            if key not in DEFAULTS:
                hint = difflib.get_close_matches(key, list(DEFAULTS), n=1)
                suggestion = f"; did you mean {hint[0]!r}?" if hint else ""
                raise ConfigError(f"unknown config key {key!r} (from {source}){suggestion}")
    for key, (default, _, _) in DEFAULTS.items():
        if key in flag_values and flag_values[key] is not None:
            values[key], provenance[key] = _coerce(key, flag_values[key], "flag"), "flag"
        elif key in file_values:
            values[key], provenance[key] = _coerce(key, file_values[key], "file"), "file"
        else:
            values[key] = list(default) if isinstance(default, list) else default
            provenance[key] = "default"
    _validate(values, provenance)
    return ResolvedConfig(values, provenance)


def load_config(path=None, flag_overrides: dict | None = None) -> ResolvedConfig:
    """Resolve defaults < file < flags.  An empty or missing path means defaults only."""
    file_values = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text().strip()
        if text:
            try:
                file_values = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(file_values, dict):
            raise ConfigError(f"{p}: expected a JSON object of key/value pairs")
    return resolve(file_values, flag_overrides or {})


def defaults_table() -> str:
    """Markdown table of every key, its default and meaning."""
    lines = ["| key | default | meaning |", "|---|---|---|"]
    for key, (default, _, doc) in DEFAULTS.items():
        lines.append(f"| `{key}` | `{json.dumps(default)}` | {doc} |")
    return "\n".join(lines)


def net_config_for(cfg: ResolvedConfig, data) -> NetConfig:
    from .training import default_net_config

    return default_net_config(data, **cfg.net_overrides())

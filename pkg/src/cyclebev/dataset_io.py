"""On-disk dataset layout.

    <root>/manifest.json
    <root>/scenes/<id>/bev.bin, height.bin, pv_cam<k>.bin, img_cam<k>.bin, meta.json

Binary payloads are little-endian, row-major, headerless; their shapes are
recorded only in the manifest.  Every file is covered by a sha256 checksum.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .geometry import CameraRig, GridSpec
from .scene_synth import CLASSES, Scene, SceneBundle

SCHEMA_VERSION = 1
LABEL_DTYPE = np.dtype("<u1")
FLOAT_DTYPE = np.dtype("<f4")


class DatasetError(Exception):
    """Base class for dataset read/write failures."""


class ChecksumError(DatasetError):
    pass


class SchemaVersionError(DatasetError):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_array(path: Path, arr: np.ndarray, dtype: np.dtype) -> str:
    data = np.ascontiguousarray(arr, dtype=dtype).tobytes(order="C")
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def write_dataset(root, bundles: list[SceneBundle], rig: CameraRig, spec: GridSpec,
                  extra: dict | None = None) -> dict:
    """Write ``bundles`` under ``root`` and return the manifest."""
    root = Path(root)
    if not bundles:
        raise ValueError("nothing to write")
    n_cam = len(rig)
    h, w = rig.image_size
    checksums: dict[str, str] = {}
    ids = []
    for k, b in enumerate(bundles):
        sid = b.scene_id or f"{k:05d}"
        ids.append(sid)
        d = root / "scenes" / sid
        d.mkdir(parents=True, exist_ok=True)
        if b.bev.shape != (spec.nx, spec.ny, len(CLASSES)) or b.pv.shape != (n_cam, h, w, 3):
            raise ValueError(f"scene {sid}: arrays do not match the shared grid/rig")
        checksums[f"scenes/{sid}/bev.bin"] = _write_array(d / "bev.bin", b.bev, LABEL_DTYPE)
        checksums[f"scenes/{sid}/height.bin"] = _write_array(d / "height.bin", b.height, FLOAT_DTYPE)
        for c in range(n_cam):
            checksums[f"scenes/{sid}/pv_cam{c}.bin"] = _write_array(
                d / f"pv_cam{c}.bin", b.pv[c], LABEL_DTYPE
            )
            checksums[f"scenes/{sid}/img_cam{c}.bin"] = _write_array(
                d / f"img_cam{c}.bin", b.images[c], FLOAT_DTYPE
            )
        meta = {"scene": b.scene.to_dict(), "visibility": [float(v) for v in b.visibility]}
        meta_bytes = json.dumps(meta, sort_keys=True).encode()
        (d / "meta.json").write_bytes(meta_bytes)
        checksums[f"scenes/{sid}/meta.json"] = hashlib.sha256(meta_bytes).hexdigest()
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "grid": spec.to_dict(),
        "rig": json.loads(rig.to_json()),
        "classes": list(CLASSES),
        "image_size": [h, w],
        "scene_ids": ids,
        "checksums": checksums,
    }
    if extra:
        manifest["extra"] = extra
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise MissingFileError(f"missing manifest: {path}")
    manifest = json.loads(path.read_text())
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: schema version {version!r} not supported (expected {SCHEMA_VERSION})"
        )
    return manifest


def _read(root: Path, rel: str, manifest: dict, dtype, shape) -> np.ndarray:
    path = root / rel
    if not path.exists():
        raise MissingFileError(f"missing dataset file: {path}")
    data = path.read_bytes()
    if hashlib.sha256(data).hexdigest() != manifest["checksums"].get(rel):
        raise ChecksumError(f"checksum mismatch: {path}")
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def read_dataset(root) -> tuple[list[SceneBundle], CameraRig, GridSpec]:
    """Read a dataset; validates the manifest before touching any payload."""
    root = Path(root)
    manifest = read_manifest(root)
    spec = GridSpec.from_dict(manifest["grid"])
    rig = CameraRig.from_json(json.dumps(manifest["rig"]))
    h, w = manifest["image_size"]
    n_cam = len(rig)
    # fail on missing files before decoding anything
    for rel in manifest["checksums"]:
        if not (root / rel).exists():
            raise MissingFileError(f"missing dataset file: {root / rel}")
    bundles = []
    for sid in manifest["scene_ids"]:
        base = f"scenes/{sid}"
        bev = _read(root, f"{base}/bev.bin", manifest, LABEL_DTYPE, (spec.nx, spec.ny, 3))
        height = _read(root, f"{base}/height.bin", manifest, FLOAT_DTYPE, (spec.nx, spec.ny, 1))
        pv = np.stack([
            _read(root, f"{base}/pv_cam{c}.bin", manifest, LABEL_DTYPE, (h, w, 3))
            for c in range(n_cam)
        ])
        images = np.stack([
            _read(root, f"{base}/img_cam{c}.bin", manifest, FLOAT_DTYPE, (h, w, 3))
            for c in range(n_cam)
        ])
        meta_path = root / base / "meta.json"
        meta_bytes = meta_path.read_bytes()
        if hashlib.sha256(meta_bytes).hexdigest() != manifest["checksums"].get(f"{base}/meta.json"):
            raise ChecksumError(f"checksum mismatch: {meta_path}")
        meta = json.loads(meta_bytes)
        bundles.append(
            SceneBundle(
                scene=Scene.from_dict(meta["scene"]),
                bev=bev,
                height=height,
                pv=pv,
                images=images,
                visibility=np.array(meta["visibility"], dtype=np.float64),
                scene_id=sid,
            )
        )
    return bundles, rig, spec

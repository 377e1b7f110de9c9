"""Fast built-in checks: loss gradients against finite differences and the
vectorised code against the brute-force oracles."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import losses, oracles
from .eval_report import compute_iou
from .geometry import GridSpec, backproject_to_ground, default_rig, project_world_to_image
from .scene_synth import SceneParams, rasterize_bev_and_height, sample_scene

FD_STEP = 1e-5
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _grad_check(name: str, fn, shapes: list[tuple], seed: int, which: int = 0,
                binary: dict | None = None) -> CheckResult:
    """Compare autograd and central differences of ``fn`` w.r.t. argument ``which``."""
    rng = np.random.default_rng(seed)
    args = []
    for k, shp in enumerate(shapes):
        if binary and k in binary:
            args.append((rng.random(shp) < 0.5).astype(np.float64))
        else:
            args.append(rng.normal(size=shp))

    def f(x):
        a = [torch.from_numpy(v) for v in args]
        a[which] = torch.from_numpy(x)
        return float(fn(*a))

    t = [torch.from_numpy(v) for v in args]
    t[which] = t[which].clone().requires_grad_(True)
    fn(*t).backward()
    analytic = t[which].grad.numpy()
    numeric = oracles.central_difference(f, args[which], FD_STEP)
    err = oracles.max_rel_error(analytic, numeric, floor=1e-6 * np.abs(numeric).max())
    return CheckResult(f"grad:{name}", err < GRAD_TOL, f"max rel err {err:.2e}")


def gradient_suite(seed: int = 0) -> list[CheckResult]:
    cw = losses.DEFAULT_CLASS_WEIGHTS
    shp = (3, 8, 8)
    w = losses.LossWeights()

    def overall(a, b, c, d, e):
        parts = {"bce1": losses.weighted_bce(a, (b > 0).double(), cw),
                 "height": losses.height_loss(c, torch.sigmoid(a[:1])),
                 "align": losses.align_loss(a, d),
                 "cycle": losses.cycle_loss((b[None] > 0).double(), e[None], cw),
                 "bce2": losses.weighted_bce(e, (b > 0).double(), cw)}
        return losses.overall_loss(parts, w).total

    return [
        _grad_check("weighted_bce", lambda x, y: losses.weighted_bce(x, y, cw), [shp, shp], seed, binary={1: 1}),
        _grad_check("cycle_loss", lambda y, x: losses.cycle_loss(y, x, cw), [(4,) + shp, (4,) + shp], seed + 1,
                    which=1, binary={0: 1}),
        _grad_check("height_loss", lambda y, x: losses.height_loss(y, x), [(1, 8, 8), (1, 8, 8)], seed + 2,
                    which=1),
        _grad_check("align_loss", lambda x, y: losses.align_loss(x, y), [shp, shp], seed + 3),
        _grad_check("overall_loss", overall, [shp, shp, (1, 8, 8), shp, shp], seed + 4),
        _grad_check("feature_cycle_loss", lambda y, x: losses.feature_cycle_loss(y, x), [shp, shp], seed + 5,
                    which=1),
    ]


def oracle_suite(seed: int = 0, n_iou: int = 100, n_scenes: int = 5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    # weighted BCE against the scalar loop
    x = rng.normal(size=(3, 8, 8)) * 3
    y = (rng.random((3, 8, 8)) < 0.5).astype(float)
    got = float(losses.weighted_bce(torch.from_numpy(x), torch.from_numpy(y)))
    ref = oracles.weighted_bce_reference(x, y, losses.DEFAULT_CLASS_WEIGHTS)
    out.append(CheckResult("oracle:weighted_bce", abs(got - ref) < 1e-10, f"|diff| {abs(got - ref):.1e}"))
    # analytic values
    v = float(losses.weighted_bce(torch.zeros(3, 4, 4, dtype=torch.float64), torch.ones(3, 4, 4), (1, 1, 1)))
    out.append(CheckResult("exact:bce_half", abs(v - 3 * math.log(2)) < 1e-10, f"{v!r}"))
    total = float(losses.overall_loss({k: torch.tensor(1.0, dtype=torch.float64)
                                       for k in losses.PART_NAMES}).total)
    out.append(CheckResult("exact:overall", abs(total - 3.401) < 1e-12, f"{total!r}"))
    # IoU against per-cell counting
    bad = 0
    for _ in range(n_iou):
        p = rng.random((3, 10, 10))
        g = (rng.random((3, 10, 10)) < 0.3).astype(np.uint8)
        t = compute_iou(p, g)
        if list(t.per_class.values()) != oracles.iou_reference(p, g):
            bad += 1
    out.append(CheckResult("oracle:compute_iou", bad == 0, f"{bad}/{n_iou} mismatches"))
    # projection round trip
    rig = default_rig()
    cam = rig[0]
    pts = np.column_stack([rng.uniform(3, 30, 2000), rng.uniform(-20, 20, 2000), np.zeros(2000)])
    proj = project_world_to_image(cam, pts)
    back, hit = backproject_to_ground(cam, proj.uv[proj.valid])
    err = float(np.abs(back[hit] - pts[proj.valid][hit]).max()) if hit.any() else 0.0
    out.append(CheckResult("oracle:projection_roundtrip", hit.all() and err < 1e-9, f"max err {err:.1e} m"))
    # rasterisation against shapely containment
    spec = GridSpec()
    bad = 0
    for k in range(n_scenes):
        scene = sample_scene(10_000 + k, SceneParams(), spec)
        bev, h = rasterize_bev_and_height(scene, spec)
        rb, rh = oracles.rasterize_reference(scene, spec)
        bad += not (np.array_equal(bev, rb) and np.array_equal(h, rh))
    out.append(CheckResult("oracle:rasterize", bad == 0, f"{bad}/{n_scenes} scenes differ"))
    return out


def run(verbose: bool = True) -> bool:
    t0 = time.time()
    results = gradient_suite() + oracle_suite()
    for r in results:
        if verbose:
            print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    ok = all(r.ok for r in results)
    if verbose:
        print(f"selftest {'passed' if ok else 'FAILED'} in {time.time() - t0:.1f}s")
    return ok

"""Procedural driving scenes and their exact ground truth.

A scene is a handful of road rectangles plus vehicle and pedestrian boxes
standing on z = 0.  From it we render the BEV label map, the object height
map, per-camera perspective segmentation maps (ray cast with a z-buffer) and
flat-shaded camera images that are pixel aligned with those maps.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from shapely.geometry import Polygon

from . import geometry as geo
from .geometry import CameraModel, CameraRig, GridSpec

CLASSES = ("drivable", "vehicle", "pedestrian")
OBJECT_CLASSES = ("vehicle", "pedestrian")
HEIGHT_NORM = 5.0
EDGE_NUDGE = 1e-7
EGO_CLEARANCE = 3.0
HIDDEN_VIS = 0.3
# sky, off-road ground, road, vehicle, pedestrian
BASE_COLORS = np.array(
    [
        [0.55, 0.75, 0.95],
        [0.35, 0.50, 0.25],
        [0.45, 0.45, 0.45],
        [0.10, 0.20, 0.85],
        [0.90, 0.15, 0.10],
    ]
)
SKY, GROUND, ROAD, VEHICLE, PEDESTRIAN = range(5)


class PlacementError(RuntimeError):
    """Raised when scene sampling cannot satisfy a placement constraint."""


@dataclass(frozen=True)
class SceneObject:
    cls: str
    cx: float
    cy: float
    length: float
    width: float
    yaw: float
    height: float

    def box(self) -> tuple:
        return (self.cx, self.cy, self.length, self.width, self.height, self.yaw)

    def corners(self) -> np.ndarray:
        return geo.footprint_corners((self.cx, self.cy), self.length, self.width, self.yaw)

    def to_dict(self) -> dict:
        return {
            "cls": self.cls,
            "cx": self.cx,
            "cy": self.cy,
            "length": self.length,
            "width": self.width,
            "yaw": self.yaw,
            "height": self.height,
        }


@dataclass
class Scene:
    road: list[np.ndarray]
    objects: list[SceneObject]
    seed: int

    def boxes(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 6))
        return np.array([o.box() for o in self.objects], dtype=np.float64)

    def translated(self, dx: float, dy: float) -> "Scene":
        return Scene(
            road=[p + np.array([dx, dy]) for p in self.road],
            objects=[replace(o, cx=o.cx + dx, cy=o.cy + dy) for o in self.objects],
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "road": [p.tolist() for p in self.road],
            "objects": [o.to_dict() for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            road=[np.array(p, dtype=np.float64).reshape(-1, 2) for p in d["road"]],
            objects=[SceneObject(**o) for o in d["objects"]],
            seed=int(d["seed"]),
        )

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.objects == other.objects
            and len(self.road) == len(other.road)
            and all(np.array_equal(a, b) for a, b in zip(self.road, other.road))
        )


@dataclass(frozen=True)
class SceneParams:
    vehicle_count: tuple[int, int] = (2, 8)
    pedestrian_count: tuple[int, int] = (1, 6)
    occluded_fraction: float = 0.2
    road_family: str = "any"  # straight | cross | tjunction | any
    road_width: tuple[float, float] = (8.0, 14.0)
    vehicle_size: tuple[float, float] = (4.0, 2.0)
    vehicle_jitter: float = 0.3
    vehicle_height: tuple[float, float] = (1.4, 3.5)
    pedestrian_size: float = 0.5
    pedestrian_height: tuple[float, float] = (1.5, 2.0)
    max_tries: int = 200

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneParams":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class SceneBundle:
    scene: Scene
    bev: np.ndarray  # (X, Y, 3) uint8
    height: np.ndarray  # (X, Y, 1) float32
    pv: np.ndarray  # (N, H, W, 3) uint8
    images: np.ndarray  # (N, H, W, 3) float32
    visibility: np.ndarray  # (n_objects,) float64
    scene_id: str = ""


# --- sampling -------------------------------------------------------------------


def _road_polygons(rng: np.random.Generator, spec: GridSpec, params: SceneParams):
    family = params.road_family
    if family == "any":
        family = ("straight", "cross", "tjunction")[rng.integers(3)]
    if family not in ("straight", "cross", "tjunction"):
        raise ValueError(f"unknown road family {family!r}")
    half = 0.5 * min(spec.extent_x, spec.extent_y)
    angle = rng.uniform(-math.pi / 6, math.pi / 6) + rng.integers(2) * math.pi / 2
    offset = rng.uniform(-2.0, 2.0)
    width = rng.uniform(*params.road_width)
    reach = 1.5 * math.hypot(spec.extent_x, spec.extent_y) / 2.0

    def strip(theta, off, w, start, stop):
        d = np.array([math.cos(theta), math.sin(theta)])
        n = np.array([-d[1], d[0]])
        base = n * off
        return np.array(
            [
                base + d * start - n * w / 2,
                base + d * stop - n * w / 2,
                base + d * stop + n * w / 2,
                base + d * start + n * w / 2,
            ]
        )

    polys = [strip(angle, offset, width, -reach, reach)]
    if family in ("cross", "tjunction"):
        w2 = rng.uniform(*params.road_width)
        along = rng.uniform(-0.4 * half, 0.4 * half)
        start = -reach if family == "cross" else offset
        # side road crosses the main road at `along`
        d = np.array([math.cos(angle), math.sin(angle)])
        side = strip(angle + math.pi / 2, 0.0, w2, start, reach) + d * along
        polys.append(side)
    return [p + EDGE_NUDGE for p in polys]


def _in_road(road, pt) -> bool:
    return any(point_in_polygon(p, np.asarray(pt)[None])[0] for p in road)


def _footprint_ok(obj: SceneObject, placed: list[Polygon], spec: GridSpec) -> bool:
    corners = obj.corners()
    if np.any(np.abs(corners[:, 0]) >= spec.extent_x / 2) or np.any(
        np.abs(corners[:, 1]) >= spec.extent_y / 2
    ):
        return False
    poly = Polygon(corners)
    ego = Polygon([(-EGO_CLEARANCE, -EGO_CLEARANCE), (EGO_CLEARANCE, -EGO_CLEARANCE),
                   (EGO_CLEARANCE, EGO_CLEARANCE), (-EGO_CLEARANCE, EGO_CLEARANCE)])
    if poly.intersects(ego):
        return False
    return not any(poly.buffer(0.2).intersects(q) for q in placed)


def _draw_object(rng, cls, params: SceneParams, road, spec: GridSpec) -> SceneObject:
    half_x, half_y = spec.extent_x / 2, spec.extent_y / 2
    if cls == "vehicle":
        length = params.vehicle_size[0] + rng.uniform(-1, 1) * params.vehicle_jitter
        width = params.vehicle_size[1] + rng.uniform(-1, 1) * params.vehicle_jitter * 0.5
        height = rng.uniform(*params.vehicle_height)
        # prefer road placement, aligned with the local road direction
        for _ in range(20):
            cx, cy = rng.uniform(-half_x, half_x), rng.uniform(-half_y, half_y)
            if _in_road(road, (cx, cy)):
                break
        poly = road[0]
        d = poly[1] - poly[0]
        yaw = math.atan2(d[1], d[0]) + rng.normal(0, 0.1) + rng.integers(2) * math.pi
    else:
        length = width = params.pedestrian_size
        height = rng.uniform(*params.pedestrian_height)
        cx, cy = rng.uniform(-half_x, half_x), rng.uniform(-half_y, half_y)
        yaw = rng.uniform(-math.pi, math.pi)
    return SceneObject(cls, float(cx), float(cy), float(length), float(width),
                       float(yaw), float(height))


def _place_behind(rng, cls, occluder: SceneObject, params: SceneParams, spec: GridSpec):
    """Candidate object inside the shadow of a broadside ``occluder`` seen from the origin."""
    proto = _draw_object(rng, cls, params, [np.zeros((4, 2))], spec)
    dist = math.hypot(occluder.cx, occluder.cy)
    bearing = math.atan2(occluder.cy, occluder.cx)
    gap = 0.5 * occluder.width + 0.5 * proto.length + rng.uniform(0.5, 10.0)
    r = dist + gap
    # stay inside the angular shadow of the occluder
    half_shadow = math.atan2(0.5 * occluder.length, dist)
    half_obj = math.atan2(0.5 * max(proto.width, proto.length if cls != "vehicle" else 0), r)
    spread = max(0.0, 0.8 * half_shadow - half_obj)
    bearing += rng.uniform(-spread, spread)
    height = min(proto.height, max(0.6 * occluder.height, params.pedestrian_height[0]))
    return replace(
        proto,
        cx=float(r * math.cos(bearing)),
        cy=float(r * math.sin(bearing)),
        yaw=float(bearing if cls == "vehicle" else proto.yaw),
        height=float(height),
    )


def _place_hidden(rng, cls, k, objects, polys, params, spec, rig):
    occluders = sorted(
        (i for i, o in enumerate(objects) if o.cls == "vehicle" and o.height >= 1.4),
        key=lambda i: math.hypot(objects[i].cx, objects[i].cy),
    )
    if not occluders:
        return None
    tries = max(4, params.max_tries // len(occluders))
    for j in range(len(occluders)):
        occ_idx = occluders[(k + j) % len(occluders)]
        occ = objects[occ_idx]
        bearing = math.atan2(occ.cy, occ.cx)
        # broadside occluder, tall enough to hide what stands behind it
        tall = max(occ.height, min(params.vehicle_height[1], 3.0))
        turned = replace(occ, yaw=float(bearing + math.pi / 2), height=float(tall))
        others = polys[:occ_idx] + polys[occ_idx + 1:]
        if _footprint_ok(turned, others, spec):
            occ = turned
        trial_polys = polys[:occ_idx] + [Polygon(occ.corners())] + polys[occ_idx + 1:]
        for _ in range(tries):
            obj = _place_behind(rng, cls, occ, params, spec)
            if not _footprint_ok(obj, trial_polys, spec):
                continue
            if rig is not None:
                trial = objects[:occ_idx] + [occ] + objects[occ_idx + 1:] + [obj]
                vis = geo.visibility_fraction(Scene([], trial, 0), len(trial) - 1, rig, 6)
                if vis >= HIDDEN_VIS:
                    continue
            objects[occ_idx] = occ
            polys[occ_idx] = trial_polys[occ_idx]
            return obj
    return None


def sample_scene(seed: int, params: SceneParams = SceneParams(), spec: GridSpec = GridSpec(),
                 rig: CameraRig | None = None) -> Scene:
    """Draw a scene; deterministic in ``seed``.

    ``occluded_fraction`` of the objects are placed in the shadow of a free
    vehicle (turned broadside to the ego); that vehicle is made tall enough
    to hide them.  ``rig`` is only used to check the occlusion outcome.
    """
    rng = np.random.default_rng(seed)
    road = _road_polygons(rng, spec, params)
    n_veh = int(rng.integers(params.vehicle_count[0], params.vehicle_count[1] + 1))
    n_ped = int(rng.integers(params.pedestrian_count[0], params.pedestrian_count[1] + 1))
    classes = ["vehicle"] * n_veh + ["pedestrian"] * n_ped
    n_occ = int(round(params.occluded_fraction * len(classes)))
    # hidden objects are drawn from the end of a shuffled class list
    order = rng.permutation(len(classes))
    classes = [classes[i] for i in order]
    free_classes, hidden_classes = classes[: len(classes) - n_occ], classes[len(classes) - n_occ:]
    if hidden_classes and "vehicle" not in free_classes:
        # an occluder must exist; swap one hidden vehicle into the free set
        if "vehicle" in hidden_classes:
            k = hidden_classes.index("vehicle")
            free_classes.append(hidden_classes.pop(k))
        else:
            raise PlacementError("occluded_fraction > 0 needs at least one vehicle occluder")

    objects: list[SceneObject] = []
    polys: list[Polygon] = []
    for cls in free_classes:
        for _ in range(params.max_tries):
            obj = _draw_object(rng, cls, params, road, spec)
            if _footprint_ok(obj, polys, spec):
                break
        else:
            raise PlacementError(f"could not place a free {cls} without overlap")
        objects.append(obj)
        polys.append(Polygon(obj.corners()))

    n_free = len(objects)
    for k, cls in enumerate(hidden_classes):
        placed = _place_hidden(rng, cls, k, objects, polys, params, spec, rig)
        if placed is None:
            # spawn one extra occluder vehicle, then retry once
            for _ in range(params.max_tries):
                extra = _draw_object(rng, "vehicle", params, road, spec)
                if _footprint_ok(extra, polys, spec) and math.hypot(extra.cx, extra.cy) < 15:
                    objects.insert(n_free, extra)
                    polys.insert(n_free, Polygon(extra.corners()))
                    n_free += 1
                    break
            placed = _place_hidden(rng, cls, k, objects, polys, params, spec, rig)
        if placed is None:
            raise PlacementError(f"could not place an occluded {cls} behind any vehicle")
        objects.append(placed)
        polys.append(Polygon(placed.corners()))
    return Scene(road=road, objects=objects, seed=int(seed))


# --- BEV rasterisation --------------------------------------------------------------


def point_in_polygon(poly, pts) -> np.ndarray:
    """Even-odd rule, vectorised over points."""
    poly = np.asarray(poly, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    xj, yj = poly[-1]
    for xi, yi in poly:
        crosses = (yi > y) != (yj > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (xj - xi) * (y - yi) / (yj - yi) + xi
        inside ^= crosses & (x < xint)
        xj, yj = xi, yi
    return inside


def object_instance_map(scene: Scene, spec: GridSpec) -> np.ndarray:
    """(X, Y) int array with the index of the object covering each cell, -1 elsewhere."""
    centers = geo.make_bev_grid(spec, 0)[:, :2]
    inst = np.full(len(centers), -1, dtype=np.int64)
    for k, obj in enumerate(scene.objects):
        inst[point_in_polygon(obj.corners(), centers)] = k
    return inst.reshape(spec.nx, spec.ny)


def rasterize_bev_and_height(scene: Scene, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Centre-sample rasterisation.

    Returns the (X, Y, 3) uint8 label map in class order (drivable, vehicle,
    pedestrian) and the (X, Y, 1) float32 height map, object height / 5 m
    clipped to 1.
    """
    centers = geo.make_bev_grid(spec, 0)[:, :2]
    bev = np.zeros((len(centers), 3), dtype=np.uint8)
    height = np.zeros(len(centers), dtype=np.float32)
    for poly in scene.road:
        bev[point_in_polygon(poly, centers), 0] = 1
    for obj in scene.objects:
        m = point_in_polygon(obj.corners(), centers)
        bev[m, CLASSES.index(obj.cls)] = 1
        height[m] = min(obj.height / HEIGHT_NORM, 1.0)
    return bev.reshape(spec.nx, spec.ny, 3), height.reshape(spec.nx, spec.ny, 1)


# --- perspective rendering -------------------------------------------------------------


@dataclass
class CameraRender:
    labels: np.ndarray  # (H, W) in {SKY, GROUND, ROAD, VEHICLE, PEDESTRIAN}
    instance: np.ndarray  # (H, W) object index or -1
    depth: np.ndarray  # (H, W) camera depth of the visible surface, inf for sky
    ground_xy: np.ndarray  # (H, W, 2) ground hit, NaN where none


def render_camera(scene: Scene, camera: CameraModel, spec: GridSpec) -> CameraRender:
    h, w = camera.height, camera.width
    vs, us = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    pix = np.stack([us.ravel(), vs.ravel()], axis=1)
    dirs = geo.pixel_rays(camera, pix)  # t == camera depth along each ray

    t_obj = geo.ray_box_hits(camera.T, dirs, scene.boxes())
    if t_obj.shape[1]:
        nearest = t_obj.argmin(axis=1)
        t_near = t_obj[np.arange(len(dirs)), nearest]
    else:
        nearest = np.zeros(len(dirs), dtype=np.int64)
        t_near = np.full(len(dirs), np.inf)

    ground, hit = geo.backproject_to_ground(camera, pix)
    t_ground = np.full(len(dirs), np.inf)
    t_ground[hit] = -camera.T[2] / dirs[hit, 2]

    labels = np.full(len(dirs), SKY, dtype=np.int64)
    labels[hit] = GROUND
    half_x, half_y = spec.extent_x / 2, spec.extent_y / 2
    within = hit & (np.abs(ground[:, 0]) < half_x) & (np.abs(ground[:, 1]) < half_y)
    on_road = np.zeros(len(dirs), dtype=bool)
    for poly in scene.road:
        on_road[within] |= point_in_polygon(poly, ground[within, :2])
    labels[on_road] = ROAD

    obj_wins = t_near < t_ground
    instance = np.where(obj_wins, nearest, -1)
    cls_code = np.array(
        [VEHICLE if o.cls == "vehicle" else PEDESTRIAN for o in scene.objects] or [0]
    )
    labels[obj_wins] = cls_code[nearest[obj_wins]]
    depth = np.where(obj_wins, t_near, t_ground)
    return CameraRender(
        labels=labels.reshape(h, w),
        instance=instance.reshape(h, w),
        depth=depth.reshape(h, w),
        ground_xy=ground[:, :2].reshape(h, w, 2),
    )


def labels_to_pv(labels: np.ndarray) -> np.ndarray:
    pv = np.zeros(labels.shape + (3,), dtype=np.uint8)
    pv[..., 0] = labels == ROAD
    pv[..., 1] = labels == VEHICLE
    pv[..., 2] = labels == PEDESTRIAN
    return pv


def render_pv_seg(scene: Scene, rig: CameraRig, spec: GridSpec = GridSpec(),
                  flip_prob: float = 0.0, noise_seed: int = 0) -> np.ndarray:
    """Per-camera PV segmentation maps, (N, H, W, 3) uint8.

    ``flip_prob`` > 0 applies symmetric label noise for sensitivity studies.
    """
    maps = np.stack([labels_to_pv(render_camera(scene, cam, spec).labels) for cam in rig])
    if flip_prob > 0:
        rng = np.random.default_rng([noise_seed, 0x5EED])
        flips = rng.random(maps.shape) < flip_prob
        maps = np.where(flips, 1 - maps, maps).astype(np.uint8)
    return maps


def _value_noise(rng: np.random.Generator, h: int, w: int, cells: int = 8) -> np.ndarray:
    coarse = rng.standard_normal((cells + 1, 2 * cells + 1))
    return ndimage.zoom(coarse, (h / (cells + 1), w / (2 * cells + 1)), order=1)[:h, :w]


def render_images(scene: Scene, rig: CameraRig, seed: int, spec: GridSpec = GridSpec(),
                  renders: list[CameraRender] | None = None) -> np.ndarray:
    """Flat-shaded camera images, (N, H, W, 3) float32 in [0, 1].

    Base colour per surface class, a world-anchored checker on the ground,
    per-object tint, smooth procedural noise and a per-scene brightness gain.
    """
    rng = np.random.default_rng([seed, 0x1A6E])
    gain = rng.uniform(0.9, 1.1)
    tints = rng.uniform(-0.05, 0.05, size=(max(len(scene.objects), 1), 3))
    out = []
    for k, cam in enumerate(rig):
        r = renders[k] if renders is not None else render_camera(scene, cam, spec)
        img = BASE_COLORS[r.labels].copy()
        gx, gy = r.ground_xy[..., 0], r.ground_xy[..., 1]
        ground = (r.labels == GROUND) | (r.labels == ROAD)
        with np.errstate(invalid="ignore"):
            checker = (np.floor(gx / 2.0) + np.floor(gy / 2.0)) % 2
        img[ground] += np.where(checker[ground] > 0, 0.03, -0.03)[:, None]
        objs = r.instance >= 0
        img[objs] += tints[r.instance[objs]]
        # darker side faces so box geometry stays visible
        shade = np.clip(r.depth / 60.0, 0.0, 0.08)
        img[objs] -= shade[objs, None]
        img += 0.02 * _value_noise(rng, cam.height, cam.width)[..., None]
        out.append(np.clip(img * gain, 0.0, 1.0))
    return np.stack(out).astype(np.float32)


def classify_by_base_color(images: np.ndarray) -> np.ndarray:
    """Index of the nearest base colour per pixel."""
    flat = images.reshape(-1, 3).astype(np.float64)
    d = ((flat[:, None, :] - BASE_COLORS[None]) ** 2).sum(-1)
    return d.argmin(axis=1).reshape(images.shape[:-1])


# --- augmentation --------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    rot_deg: float = 1.0
    scale: tuple[float, float] = (0.8, 1.2)
    crop: float = 0.2


def augment_camera(image: np.ndarray, camera: CameraModel, rot_deg: float, scale: float,
                   shift: tuple[float, float]) -> tuple[np.ndarray, CameraModel]:
    """Rotate about the principal point, zoom about the image centre, then shift.

    Rotation is absorbed into the extrinsics (in-plane roll), zoom and shift
    into the intrinsics, so the pinhole projection stays exact for square pixels.
    """
    K = camera.K
    h, w = camera.height, camera.width
    theta = math.radians(rot_deg)
    roll = np.array(
        [[math.cos(theta), -math.sin(theta), 0.0], [math.sin(theta), math.cos(theta), 0.0],
         [0.0, 0.0, 1.0]]
    )
    zoom = np.array(
        [[scale, 0.0, (1 - scale) * w / 2 - shift[0]], [0.0, scale, (1 - scale) * h / 2 - shift[1]],
         [0.0, 0.0, 1.0]]
    )
    new_K = zoom @ K
    new_R = roll @ camera.R
    # output pixel x' = new_K roll K^-1 x: sample the source at the inverse map
    fwd = new_K @ roll @ np.linalg.inv(K)
    inv = np.linalg.inv(fwd)
    vs, us = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    dst = np.stack([us.ravel(), vs.ravel(), np.ones(h * w)])
    src = inv @ dst
    src = src[:2] / src[2]
    coords = np.stack([src[1] - 0.5, src[0] - 0.5])
    warped = np.stack(
        [
            ndimage.map_coordinates(image[..., c], coords, order=1, mode="constant", cval=0.0)
            .reshape(h, w)
            for c in range(image.shape[-1])
        ],
        axis=-1,
    )
    return warped.astype(image.dtype), CameraModel(K=new_K, R=new_R, T=camera.T.copy(),
                                                   height=h, width=w)


def augment(images: np.ndarray, rig: CameraRig, seed: int,
            config: AugmentConfig = AugmentConfig()) -> tuple[np.ndarray, CameraRig]:
    """Random rotation / resize / crop per camera with matching camera updates.

    PV label maps are deliberately left untouched by the caller.
    """
    rng = np.random.default_rng([seed, 0xA06])
    out, cams = [], []
    for img, cam in zip(images, rig):
        rot = rng.uniform(-config.rot_deg, config.rot_deg)
        s = rng.uniform(*config.scale)
        # keep the cropped-away share of the frame at or below `crop`
        keep = 1.0 - rng.uniform(0.0, config.crop)
        fy = rng.uniform(keep, 1.0)
        fx = keep / fy
        shift = ((1.0 - fx) * cam.width * rng.uniform(-0.5, 0.5),
                 (1.0 - fy) * cam.height * rng.uniform(0.0, 1.0))
        if rot == 0.0 and s == 1.0 and shift == (0.0, 0.0):
            out.append(img.copy())
            cams.append(CameraModel(K=cam.K.copy(), R=cam.R.copy(), T=cam.T.copy(),
                                    height=cam.height, width=cam.width))
            continue
        warped, new_cam = augment_camera(img, cam, rot, s, shift)
        out.append(warped)
        cams.append(new_cam)
    return np.stack(out), CameraRig(cams)


# --- bundles ---------------------------------------------------------------------------


def scene_seed(dataset_seed: int, index: int) -> int:
    ss = np.random.SeedSequence([int(dataset_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def make_bundle(seed: int, rig: CameraRig, spec: GridSpec, params: SceneParams,
                scene_id: str = "", flip_prob: float = 0.0, sampling: int = 16) -> SceneBundle:
    scene = sample_scene(seed, params, spec, rig)
    bev, height = rasterize_bev_and_height(scene, spec)
    renders = [render_camera(scene, cam, spec) for cam in rig]
    pv = np.stack([labels_to_pv(r.labels) for r in renders])
    if flip_prob > 0:
        pv = render_pv_seg(scene, rig, spec, flip_prob, seed)
    images = render_images(scene, rig, seed, spec, renders)
    vis = np.array(
        [geo.visibility_fraction(scene, k, rig, sampling) for k in range(len(scene.objects))],
        dtype=np.float64,
    )
    return SceneBundle(scene, bev, height, pv, images, vis, scene_id)


def _bundle_job(args):
    return make_bundle(*args)


def generate_dataset(n_scenes: int, dataset_seed: int, rig: CameraRig, spec: GridSpec,
                     params: SceneParams = SceneParams(), workers: int = 1,
                     flip_prob: float = 0.0) -> list[SceneBundle]:
    """Independent RNG stream per scene; output independent of ``workers``."""
    jobs = [
        (scene_seed(dataset_seed, i), rig, spec, params, f"{i:05d}", flip_prob)
        for i in range(n_scenes)
    ]
    if workers <= 1:
        return [_bundle_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_bundle_job, jobs))

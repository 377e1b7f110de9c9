import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cyclebev import eval_report, training
from cyclebev.eval_report import (CLASS_COLORS, AblationError, AblationMatrix, IouTable, compute_iou,
                                  emit_figures, iou_counts, run_ablation, stratified_eval, stratum_masks)
from cyclebev.geometry import GridSpec, default_rig, visibility_fraction
from cyclebev.oracles import iou_reference
from cyclebev.scene_synth import (CLASSES, OBJECT_CLASSES, Scene, SceneBundle, SceneObject, SceneParams,
                                  generate_dataset, object_instance_map, rasterize_bev_and_height)
from cyclebev.training import TrainConfig


def _maps(rng, shape=(3, 10, 10)):
    return rng.random(shape), (rng.random(shape) < 0.4).astype(np.uint8)


# --- compute_iou -------------------------------------------------------------------


def test_iou_examples():
    gt = np.zeros((3, 4, 4))
    gt[1, :2, :2] = 1
    gt[0, 2:, 2:] = 1
    assert all(v == 1.0 for v in compute_iou(gt, gt).per_class.values())
    disjoint = np.zeros_like(gt)
    disjoint[1, 2:, 2:] = 1
    assert compute_iou(disjoint, gt).per_class["vehicle"] == 0.0
    wider = gt.copy()
    wider[1, :2, 2:] = 1
    assert compute_iou(wider, gt).per_class["vehicle"] == 0.5
    # pedestrian absent and not predicted
    assert compute_iou(wider, gt).per_class["pedestrian"] == 1.0


def test_iou_matches_brute_force(rng):
    for _ in range(100):
        pred, gt = _maps(rng)
        assert list(compute_iou(pred, gt).per_class.values()) == iou_reference(pred, gt)


def test_iou_global_counts_not_scene_means():
    gt = np.zeros((2, 3, 2, 2))
    pred = np.zeros_like(gt)
    gt[0, 1, 0, 0] = 1
    pred[0, 1, 0, 0] = 1
    gt[1, 1] = 1  # 4 cells, none predicted
    assert compute_iou(pred, gt).per_class["vehicle"] == pytest.approx(1 / 5)


def test_iou_errors():
    with pytest.raises(ValueError, match="shape"):
        compute_iou(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))
    with pytest.raises(ValueError):
        compute_iou(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)), threshold=1.0)


def test_iou_table_invariants():
    t = IouTable({"drivable": 0.2, "vehicle": 0.5, "pedestrian": 0.8})
    assert t.average == pytest.approx(0.5)
    assert IouTable.from_dict(t.as_dict()) == t
    with pytest.raises(ValueError):
        IouTable({"vehicle": 1.5})


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5, 5), elements=st.floats(0, 1)),
       arrays(np.uint8, (3, 5, 5), elements=st.integers(0, 1)),
       st.floats(0.01, 0.98), st.floats(0.0, 0.5))
def test_intersection_monotone_in_threshold(pred, gt, lo, bump):
    hi = min(lo + bump, 0.99)
    assert np.all(iou_counts(pred, gt, hi)[0] <= iou_counts(pred, gt, lo)[0])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4, 6), elements=st.floats(0, 1)),
       arrays(np.uint8, (3, 4, 6), elements=st.integers(0, 1)))
def test_iou_transpose_symmetry(pred, gt):
    a = compute_iou(pred, gt).per_class
    b = compute_iou(pred.transpose(0, 2, 1), gt.transpose(0, 2, 1)).per_class
    assert a == b


# --- stratified evaluation -----------------------------------------------------------


@pytest.fixture(scope="module")
def occluded_scenes():
    rig = default_rig(56, 112)
    params = SceneParams(occluded_fraction=0.5)
    return generate_dataset(50, 21, rig, GridSpec(), params), rig


def _gt(bundles):
    return np.stack([np.moveaxis(b.bev, -1, 0) for b in bundles]).astype(np.float64)


def test_stratum_partition_covers_object_cells_once(occluded_scenes):
    bundles, _ = occluded_scenes
    spec = GridSpec()
    n_low = n_cells = 0
    for b in bundles:
        inst = object_instance_map(b.scene, spec)
        masks = stratum_masks(b, spec)
        obj = inst >= 0
        both = masks["high"] & masks["low"] & obj
        neither = ~masks["high"] & ~masks["low"] & obj
        assert not both.any() and not neither.any(), b.scene_id
        gt_obj = b.bev[..., 1:].any(-1)
        assert np.array_equal(gt_obj, obj)
        # stratum-restricted positives union back to the full positives
        assert np.array_equal((gt_obj & masks["high"] & obj) | (gt_obj & masks["low"] & obj), gt_obj)
        n_low += int((masks["low"] & obj).sum())
        n_cells += int(obj.sum())
    assert 0 < n_low < n_cells


def test_perfect_prediction_scores_one(occluded_scenes):
    bundles, rig = occluded_scenes
    high, low = stratified_eval(_gt(bundles), bundles, rig)
    assert high.per_class == {c: 1.0 for c in OBJECT_CLASSES}
    assert low.per_class == {c: 1.0 for c in OBJECT_CLASSES}
    assert high.stratum == ">=40%" and low.stratum == "<40%"


def test_fully_visible_objects_leave_low_stratum_empty(occluded_scenes):
    bundles, rig = occluded_scenes
    visible = [SceneBundle(b.scene, b.bev, b.height, b.pv, b.images, np.ones_like(b.visibility), b.scene_id)
               for b in bundles[:5]]
    # a model that finds no object at all
    probs = _gt(visible)
    probs[:, 1:] = 0.0
    high, low = stratified_eval(probs, visible, rig)
    assert high.per_class == {c: 0.0 for c in OBJECT_CLASSES}
    assert low.per_class == {c: 1.0 for c in OBJECT_CLASSES}


def test_order_independent(occluded_scenes):
    bundles, rig = occluded_scenes
    rng = np.random.default_rng(5)
    probs = rng.random((len(bundles), 3, 100, 100))
    a = stratified_eval(probs, bundles, rig)
    perm = rng.permutation(len(bundles))
    b = stratified_eval(probs[perm], [bundles[k] for k in perm], rig)
    assert a == b


def _hand_scene():
    rig = default_rig(56, 112)
    spec = GridSpec()
    wall = SceneObject("vehicle", 6.0, 0.0, 10.0, 2.0, math.pi / 2, 4.0)
    ped = SceneObject("pedestrian", 12.0, 0.0, 0.5, 0.5, 0.0, 1.8)
    car = SceneObject("vehicle", -10.0, 4.0, 4.0, 2.0, 0.2, 1.5)
    scene = Scene(road=[], objects=[wall, ped, car], seed=0)
    bev, height = rasterize_bev_and_height(scene, spec)
    vis = np.array([visibility_fraction(scene, k, rig) for k in range(3)])
    return SceneBundle(scene, bev, height, None, None, vis, "hand"), rig, spec


def test_stratum_assignment_matches_visibility_oracle():
    bundle, rig, spec = _hand_scene()
    assert bundle.visibility[1] == 0.0 and bundle.visibility[0] > 0.4 and bundle.visibility[2] > 0.4
    inst = object_instance_map(bundle.scene, spec)
    masks = stratum_masks(bundle, spec)
    for k, v in enumerate(bundle.visibility):
        cells = inst == k
        assert cells.any()
        expected = "high" if v >= 0.4 else "low"
        assert masks[expected][cells].all() and not masks[{"high": "low", "low": "high"}[expected]][cells].any()
    # a model that misses the hidden pedestrian: perfect on high, zero on low
    probs = np.moveaxis(bundle.bev, -1, 0)[None].astype(float)
    probs[0, 2] = 0.0
    high, low = stratified_eval(probs, [bundle], rig, spec)
    assert high.per_class == {"vehicle": 1.0, "pedestrian": 1.0}
    assert low.per_class == {"vehicle": 1.0, "pedestrian": 0.0}


def test_invisible_objects_flag():
    bundle, rig, spec = _hand_scene()
    inst = object_instance_map(bundle.scene, spec)
    masks = stratum_masks(bundle, spec, include_invisible=False)
    assert not masks["low"][inst == 1].any() and not masks["high"][inst == 1].any()


def test_missing_visibility_rejected():
    bundle, rig, spec = _hand_scene()
    bad = SceneBundle(bundle.scene, bundle.bev, bundle.height, None, None, None, "bad")
    with pytest.raises(ValueError, match="visibility"):
        stratified_eval(np.zeros((1, 3, 100, 100)), [bad], rig, spec)


# --- ablation ---------------------------------------------------------------------------


def test_mean_is_arithmetic_mean():
    rng = np.random.default_rng(0)
    m = AblationMatrix(["bce_only"], [0, 1, 2])
    m.tables["bce_only"] = {s: IouTable(dict(zip(CLASSES, rng.random(3)))) for s in (0, 1, 2)}
    mean = m.mean("bce_only")
    for c in CLASSES:
        assert abs(mean.per_class[c] - sum(m.tables["bce_only"][s].per_class[c] for s in (0, 1, 2)) / 3) < 1e-12
    d = json.loads(m.to_json())
    assert set(d["results"]["bce_only"]) == {"per_seed", "final_loss", "mean"}
    text = m.format_table()
    assert text.splitlines()[0].split()[:4] == ["row", "VCC", "Height", "Align"]


@pytest.fixture(scope="module")
def tiny_ivt(tiny_setup, tmp_path_factory):
    train, _, ncfg, _, _ = tiny_setup
    d = tmp_path_factory.mktemp("ivt")
    return training.pretrain_ivt(train, ncfg, TrainConfig(mode="ivt_pretrain", epochs=1, batch_size=2),
                                 d / "ivt.bin").checkpoint


def test_ablation_two_rows(tiny_setup, tiny_ivt, tmp_path):
    train, val, ncfg, _, _ = tiny_setup
    base = TrainConfig(mode="bce_only", epochs=1, batch_size=2)
    m = run_ablation(base, train, val, [0], {"dual": tiny_ivt}, tmp_path, rows=("bce_only", "cyclebev"),
                     net_config=ncfg)
    assert list(m.tables) == ["bce_only", "cyclebev"] and all(len(v) == 1 for v in m.tables.values())
    nonzero = {row: {k for k in ("bce1", "height", "align", "cycle", "bce2") if m.losses[row][0][k] != 0.0}
               for row in m.tables}
    assert nonzero == {"bce_only": {"bce1"}, "cyclebev": {"bce1", "height", "align", "cycle", "bce2"}}
    assert (tmp_path / "ablation.json").exists() and (tmp_path / "ablation.txt").exists()
    assert json.loads((tmp_path / "ablation.json").read_text())["rows"] == ["bce_only", "cyclebev"]


def test_ablation_failure_dumps_partial(tiny_setup, tmp_path):
    train, val, ncfg, _, _ = tiny_setup
    base = TrainConfig(mode="bce_only", epochs=1, batch_size=2)
    with pytest.raises(AblationError, match="cyclebev"):
        run_ablation(base, train, val, [0], {"dual": tmp_path / "missing.bin"}, tmp_path,
                     rows=("bce_only", "cyclebev"), net_config=ncfg)
    partial = json.loads((tmp_path / "partial.json").read_text())
    assert list(partial["results"]) == ["bce_only"]


def test_ablation_unknown_row(tiny_setup, tmp_path):
    train, val, ncfg, _, _ = tiny_setup
    with pytest.raises(AblationError, match="unknown"):
        run_ablation(TrainConfig(mode="bce_only"), train, val, [0], {}, tmp_path, rows=("nope",),
                     net_config=ncfg)


# --- figures ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def run_dirs(tiny_setup, tmp_path_factory):
    train, val, ncfg, _, _ = tiny_setup
    root = tmp_path_factory.mktemp("runs")
    for name, epochs in (("empty", 0), ("full", 2)):
        training.train_vt(train, val, ncfg, TrainConfig(mode="bce_only", epochs=epochs, batch_size=2),
                          run_dir=root / name)
    return root


def test_empty_run_gives_config_panel_only(run_dirs, tmp_path):
    files = emit_figures(run_dirs / "empty", tmp_path)
    assert [f.name for f in files] == ["config.png"]


def test_figures_complete_and_deterministic(run_dirs, tiny_setup, tmp_path):
    bundles = tiny_setup[3][4:]
    a = emit_figures(run_dirs / "full", tmp_path / "a", bundles)
    b = emit_figures(run_dirs / "full", tmp_path / "b", bundles)
    assert [f.name for f in a] == ["config.png", "loss_curves.png", "iou_bars.png", "bev_panels.png"]
    for x, y in zip(a, b):
        assert x.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        assert x.read_bytes() == y.read_bytes(), x.name


def test_matrix_figures(tmp_path):
    m = AblationMatrix(["bce_only", "cyclebev"], [0])
    for row in m.rows:
        m.tables[row] = {0: IouTable(dict(zip(CLASSES, (0.5, 0.3, 0.1))))}
    names = [f.name for f in emit_figures(m, tmp_path)]
    assert names == ["ablation_iou.png", "ablation.txt"]


def test_unwritable_out_dir(run_dirs, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(PermissionError):
        emit_figures(run_dirs / "empty", blocker / "sub")


def test_color_convention_and_legend_order():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.colors as mcolors
    import matplotlib.pyplot as plt

    # gray, blue, red in class order
    hues = [mcolors.rgb_to_hsv(c) for c in CLASS_COLORS]
    assert hues[0][1] < 0.05
    assert 0.55 < hues[1][0] < 0.7 and hues[1][1] > 0.5
    assert (hues[2][0] < 0.05 or hues[2][0] > 0.95) and hues[2][1] > 0.5
    fig, ax = plt.subplots()
    eval_report._legend(ax)
    assert [t.get_text() for t in ax.get_legend().get_texts()] == list(CLASSES)
    plt.close(fig)
    bev = np.zeros((3, 2, 2))
    bev[0] = 1
    bev[1, 0, 0] = 1
    bev[2, 1, 1] = 1
    rgb = eval_report.colorize(bev)
    assert tuple(rgb[0, 0]) == CLASS_COLORS[1] and tuple(rgb[1, 1]) == CLASS_COLORS[2]
    assert tuple(rgb[0, 1]) == CLASS_COLORS[0]

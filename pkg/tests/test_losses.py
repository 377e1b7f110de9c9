import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cyclebev.losses import (LossWeights, PART_NAMES, align_loss, cycle_loss, feature_cycle_loss,
                             height_loss, overall_loss, smooth_l1, weighted_bce)
from cyclebev.oracles import (cycle_reference, height_reference, l1_reference, smooth_l1_reference,
                              weighted_bce_reference)

D = torch.float64


def t(x):
    return torch.as_tensor(np.asarray(x), dtype=D)


def test_bce_half_probability():
    gt = torch.randint(0, 2, (3, 8, 8), dtype=D)
    assert abs(float(weighted_bce(torch.zeros(3, 8, 8, dtype=D), gt, (1, 1, 1))) - 3 * math.log(2)) < 1e-10
    assert abs(float(weighted_bce(torch.zeros(3, 8, 8, dtype=D), gt)) - 1.53 * math.log(2)) < 1e-10


def test_bce_saturated_logits():
    gt = torch.randint(0, 2, (2, 3, 8, 8), dtype=D)
    logits = torch.where(gt > 0, 40.0, -40.0).to(D)
    assert float(weighted_bce(logits, gt)) < 1e-10
    # still finite far beyond float range of exp()
    assert math.isfinite(float(weighted_bce(1e4 * (2 * gt - 1) * -1, gt)))


def test_bce_errors():
    with pytest.raises(ValueError, match="shape"):
        weighted_bce(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))
    with pytest.raises(ValueError, match="binary"):
        weighted_bce(torch.zeros(3, 4, 4), torch.full((3, 4, 4), 0.5))


def test_cycle_loss_examples(rng):
    logits = t(rng.normal(0, 2, (4, 3, 5, 6)))
    gt = t(rng.integers(0, 2, (4, 3, 5, 6)))
    w = (0.03, 0.5, 1.0)
    ref = cycle_reference(gt.numpy(), logits.numpy(), w)
    assert abs(float(cycle_loss(gt, logits)) - ref) < 1e-10
    one = cycle_loss(gt[:1], logits[:1])
    assert float(one) == float(weighted_bce(logits[0], gt[0]))
    same = cycle_loss(gt[:1].expand(4, -1, -1, -1), logits[:1].expand(4, -1, -1, -1))
    assert abs(float(same) - float(one)) < 1e-14
    with pytest.raises(ValueError, match="camera"):
        cycle_loss(gt[:3], logits)


def test_height_loss_examples(rng):
    h = t(rng.random((1, 10, 10)))
    assert float(height_loss(h, h)) == 0.0
    assert abs(float(height_loss(h, h + 0.1)) - 0.01) < 1e-12
    a, b = rng.random((1, 5, 5)), rng.random((1, 5, 5))
    assert abs(float(height_loss(t(a), t(b))) - height_reference(a, b)) < 1e-12
    with pytest.raises(ValueError):
        height_loss(h, h[:, :5])


def test_align_loss_examples():
    b = torch.zeros(2, 4, 3, 3, dtype=D)
    assert abs(float(align_loss(b + 0.5, b)) - 0.125) < 1e-12
    assert abs(float(align_loss(b + 2.0, b)) - 1.5) < 1e-12
    x = torch.randn(2, 4, 3, 3, dtype=D, requires_grad=True)
    loss = align_loss(x, x.detach().clone())
    loss.backward()
    assert loss.item() == 0.0 and float(x.grad.abs().max()) == 0.0


def test_align_gradient_policy():
    bev = torch.randn(1, 4, 3, 3, dtype=D, requires_grad=True)
    guide = torch.randn(1, 4, 3, 3, dtype=D, requires_grad=True)
    align_loss(bev, guide).backward()
    assert guide.grad is None and bev.grad is not None
    bev.grad = None
    align_loss(bev, guide, detach_target=False).backward()
    assert guide.grad is not None and torch.allclose(guide.grad, -bev.grad)


def test_feature_cycle_examples(rng):
    x = t(rng.normal(size=(2, 3, 4)))
    assert float(feature_cycle_loss(x, x)) == 0.0
    assert abs(float(feature_cycle_loss(x, x + 0.3)) - 0.3) < 1e-12
    y = t(rng.normal(size=(2, 3, 4)))
    assert abs(float(feature_cycle_loss(x, y)) - l1_reference(x.numpy(), y.numpy())) < 1e-12


def test_overall_examples():
    ones = {k: torch.tensor(1.0, dtype=D) for k in PART_NAMES}
    rep = overall_loss(ones)
    assert abs(float(rep.total) - 3.401) < 1e-12
    assert rep.absent == ()
    zeros = {k: torch.tensor(0.0, dtype=D) for k in PART_NAMES}
    assert float(overall_loss(zeros).total) == 0.0
    vcc = {"bce1": t(0.7), "cycle": t(0.3), "bce2": t(0.2)}
    rep = overall_loss(vcc)
    assert abs(float(rep.total) - (0.7 + 0.4 * 0.3 + 1.0 * 0.2)) < 1e-12
    assert set(rep.absent) == {"height", "align"}
    d = rep.as_dict()
    assert d["height"] == 0.0 and d["absent"] == ["height", "align"]


def test_overall_errors():
    with pytest.raises(FloatingPointError, match="cycle"):
        overall_loss({"bce1": t(1.0), "cycle": t(float("nan"))})
    with pytest.raises(KeyError):
        overall_loss({"bogus": t(1.0)})
    with pytest.raises(ValueError):
        LossWeights(lambda2=-1.0)


def test_overall_is_linear_in_each_part(rng):
    w = LossWeights()
    base = {k: t(rng.random()) for k in PART_NAMES}
    total = float(overall_loss(base, w).total)
    for k in PART_NAMES:
        bumped = dict(base)
        bumped[k] = base[k] + 0.25
        delta = float(overall_loss(bumped, w).total) - total
        assert abs(delta - 0.25 * w.coefficient(k)) < 1e-12


def test_report_json_line():
    rep = overall_loss({k: t(0.5) for k in PART_NAMES})
    line = rep.to_json()
    assert "\n" not in line and '"total"' in line


# --- properties -----------------------------------------------------------------

maps = arrays(np.float64, (3, 4, 4), elements=st.floats(-30, 30))
binary = arrays(np.int8, (3, 4, 4), elements=st.integers(0, 1))


@settings(max_examples=40, deadline=None)
@given(maps, binary)
def test_bce_matches_scalar_oracle_and_is_nonnegative(logits, gt):
    w = (0.03, 0.5, 1.0)
    val = float(weighted_bce(t(logits), t(gt), w))
    assert val >= 0
    assert abs(val - weighted_bce_reference(logits, gt, w)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3, 3), elements=st.floats(-5, 5)),
       arrays(np.float64, (2, 3, 3), elements=st.floats(-5, 5)))
def test_smooth_l1_matches_oracle(a, b):
    val = float(align_loss(t(a), t(b)))
    assert val >= 0 and abs(val - smooth_l1_reference(a, b)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(maps, binary)
def test_duplicating_batch_keeps_means(logits, gt):
    lg, g = t(logits)[None], t(gt)[None]
    lg2, g2 = torch.cat([lg, lg]), torch.cat([g, g])
    assert abs(float(weighted_bce(lg, g)) - float(weighted_bce(lg2, g2))) < 1e-12
    assert abs(float(height_loss(lg, g)) - float(height_loss(lg2, g2))) < 1e-12
    assert abs(float(align_loss(lg, g)) - float(align_loss(lg2, g2))) < 1e-12
    assert abs(float(feature_cycle_loss(lg, g)) - float(feature_cycle_loss(lg2, g2))) < 1e-12
    pv, pg = lg[:, None].expand(1, 2, 3, 4, 4), g[:, None].expand(1, 2, 3, 4, 4)
    assert abs(float(cycle_loss(pg, pv)) - float(cycle_loss(torch.cat([pg, pg]), torch.cat([pv, pv])))) < 1e-12


def test_smooth_l1_branches():
    x = t([-3.0, -1.0, -0.5, 0.0, 0.5, 1.0, 3.0])
    assert smooth_l1(x).tolist() == [2.5, 0.5, 0.125, 0.0, 0.125, 0.5, 2.5]


def test_gradient_suite_passes():
    from cyclebev.selftest import gradient_suite

    results = gradient_suite(0)
    assert len(results) == 6
    for r in results:
        assert r.ok, (r.name, r.detail)

import math

import numpy as np
import pytest

from pregrasp.errors import DataError
from pregrasp.reward import (
    RewardConfig,
    combine,
    hand_joint_progress,
    hand_position_progress,
    hand_rotation_progress,
    hold_closure,
    joint_importance,
    orient_progress,
    reach_progress,
    singularity_penalty,
    target_reached,
)

CFG = RewardConfig(manip_det_max=0.02)


def neutral_inputs(cfg=CFG):
    """Inputs where every term evaluates to zero."""
    far = np.full(6, 0.5)
    return dict(
        pos_prev=0.5, pos_now=0.5,
        rot_prev=1.2, rot_now=1.2,
        joint_prev=0.8, joint_now=0.8,
        reach_sdf_prev=far, reach_sdf_now=far,
        hold_sdf_now=far,
        orient_prev=2.0, orient_now=2.0,
        jacobian_det=cfg.manip_det_max,
    )


def test_position_progress_values():
    assert hand_position_progress(0.3, 0.3, CFG) == 0.0
    # closing 0.0333 m in one 1/30 s step uses the whole budget
    assert hand_position_progress(0.10, 0.0667, CFG) == pytest.approx(0.999, abs=1e-12)
    assert abs(hand_position_progress(0.10, 0.0667, CFG) - 1.0) < 0.01
    assert hand_position_progress(0.05, 0.05 + CFG.pos_step, CFG) == pytest.approx(-1.0)
    assert hand_position_progress(1.0, 0.0, CFG) == 1.0  # clamp ceiling


def test_rotation_progress_values():
    assert hand_rotation_progress(0.7, 0.7, CFG) == 0.0
    assert hand_rotation_progress(0.7, 0.7 - CFG.rot_step, CFG) == pytest.approx(1.0)
    assert hand_rotation_progress(1.0, 0.95, CFG) == pytest.approx(0.4775, abs=1e-4)


def test_joint_progress_mean_semantics():
    # one of 5 controls improving a full budget moves the mean by budget/5
    prev = CFG.joint_step
    now = 0.0
    assert hand_joint_progress(prev / 5, now, CFG) == pytest.approx(0.2)


def test_gate_values():
    assert joint_importance(0.0, 0.0, CFG) == 1.0
    assert joint_importance(CFG.pos_prox, 0.0, CFG) == 0.0
    assert joint_importance(5.0, 0.0, CFG) == 0.0
    assert joint_importance(CFG.pos_prox / 2, 0.5, CFG) == pytest.approx(0.25)


def test_gate_monotone():
    rng = np.random.default_rng(5)
    p = np.sort(rng.uniform(0, 0.4, 50))
    r = np.sort(rng.uniform(0, 1.5, 50))
    g_p = joint_importance(p, 0.3, CFG)
    g_r = joint_importance(0.05, r, CFG)
    assert np.all(np.diff(g_p) <= 1e-15)
    assert np.all(np.diff(g_r) <= 1e-15)


def test_reach_values():
    same = np.full(6, 0.2)
    assert reach_progress(same, same, CFG) == 0.0
    approached = same - CFG.pos_step
    assert reach_progress(same, approached, CFG) == 1.0  # 6x budget clamps
    receded = same + 0.05
    assert reach_progress(same, receded, CFG) == 0.0
    with pytest.raises(DataError, match="disagree"):
        reach_progress(np.zeros(6), np.zeros(5), CFG)


def test_hold_values():
    far = np.full(6, 1.0)
    assert hold_closure(far, CFG) == 0.0
    deep = np.full(6, CFG.hold_radius - CFG.hold_range)
    assert hold_closure(deep, CFG) == pytest.approx(1.0)
    mixed = np.array([CFG.hold_radius] * 3 + [CFG.hold_radius - CFG.hold_range / 2] * 3)
    assert hold_closure(mixed, CFG) == pytest.approx(0.25)


def test_hold_legacy_form_rewards_distance():
    legacy = RewardConfig(manip_det_max=0.02, legacy_hold_form=True)
    near = np.full(6, CFG.hold_radius)
    farther = np.full(6, CFG.hold_radius + CFG.hold_range / 2)
    assert hold_closure(near, legacy) == 0.0
    assert hold_closure(farther, legacy) == pytest.approx(0.5)
    # corrected form orders them the other way round
    assert hold_closure(farther, CFG) < hold_closure(near, CFG) + 1e-15


def test_orient_values():
    assert orient_progress(math.pi, 0.0) == pytest.approx(1.0)
    assert orient_progress(1.0, 1.0) == 0.0
    assert orient_progress(1.0, 1.0 + math.pi / 2) == 0.0


def test_singularity_values():
    assert singularity_penalty(0.0, CFG) == pytest.approx(-1.0)
    assert singularity_penalty(CFG.manip_det_max, CFG) == pytest.approx(0.0)
    assert singularity_penalty(5.0, CFG) == pytest.approx(0.0)
    assert singularity_penalty(CFG.manip_det_max / 2, CFG) == pytest.approx(-0.7777778, abs=1e-6)
    assert singularity_penalty(-CFG.manip_det_max, CFG) == pytest.approx(0.0)


def test_singularity_monotone():
    det = np.linspace(0, 0.03, 200)
    vals = singularity_penalty(det, CFG)
    assert np.all(np.diff(vals) >= -1e-15)


def test_target_values():
    assert target_reached(0.005, 0.10, 0.05, CFG) == 1.0
    assert target_reached(0.01, 0.10, 0.05, CFG) == 0.0  # boundary is out
    assert target_reached(0.005, 0.16, 0.05, CFG) == 0.0
    assert target_reached(0.005, 0.10, 0.1, CFG) == 0.0


def test_progress_antisymmetric_before_clamp():
    rng = np.random.default_rng(6)
    for _ in range(100):
        a, b = rng.uniform(0.2, 0.2 + CFG.pos_step / 2, size=2)
        assert hand_position_progress(a, b, CFG) == pytest.approx(
            -hand_position_progress(b, a, CFG), abs=1e-15
        )


def test_combine_all_quiet_is_zero():
    out = combine(**neutral_inputs(), cfg=CFG)
    assert out.total == pytest.approx(0.0)
    for name in out.TERM_NAMES:
        if name != "gate":
            assert np.all(np.asarray(getattr(out, name)) == pytest.approx(0.0))


def test_combine_target_alone_scores_5000():
    inputs = neutral_inputs()
    inputs.update(pos_prev=0.005, pos_now=0.005, rot_prev=0.1, rot_now=0.1,
                  joint_prev=0.05, joint_now=0.05)
    out = combine(**inputs, cfg=CFG)
    assert out.reached == 1.0
    assert out.total == pytest.approx(5000.0)


def test_combine_scales():
    inputs = neutral_inputs()
    inputs["hold_sdf_now"] = np.full(6, CFG.hold_radius - CFG.hold_range)  # hold = 1
    inputs.update(orient_prev=math.pi, orient_now=0.0)  # orient = 1
    out = combine(**inputs, cfg=CFG)
    assert out.hold == pytest.approx(1.0)
    assert out.orient == pytest.approx(1.0)
    assert out.total == pytest.approx(25.0 + 500.0)


def test_combine_linear_in_hold():
    lo = neutral_inputs()
    hi = neutral_inputs()
    hi["hold_sdf_now"] = np.full(6, CFG.hold_radius - CFG.hold_range / 2)
    t_lo = combine(**lo, cfg=CFG).total
    t_hi = combine(**hi, cfg=CFG).total
    d_hold = hold_closure(hi["hold_sdf_now"], CFG) - hold_closure(lo["hold_sdf_now"], CFG)
    assert t_hi - t_lo == pytest.approx(CFG.hold_scale * d_hold)


def test_manipulation_master_switch():
    cfg = CFG.without("manipulation")
    inputs = neutral_inputs(cfg)
    inputs["hold_sdf_now"] = np.full(6, -0.05)
    inputs["reach_sdf_prev"] = np.full(6, 0.5)
    inputs["reach_sdf_now"] = np.full(6, 0.1)
    inputs.update(orient_prev=math.pi, orient_now=0.0)
    out = combine(**inputs, cfg=cfg)
    assert np.all(out.reach == 0.0)
    assert np.all(out.hold == 0.0)
    assert np.all(out.orient == 0.0)
    assert np.all(out.manipulation == 0.0)
    assert out.total == pytest.approx(0.0)


def test_single_term_ablations():
    inputs = neutral_inputs()
    inputs["hold_sdf_now"] = np.full(6, -0.05)
    full = combine(**inputs, cfg=CFG)
    no_hold = combine(**inputs, cfg=CFG.without("hold"))
    assert full.hold > 0
    assert np.all(no_hold.hold == 0.0)
    assert no_hold.total == pytest.approx(full.total - CFG.hold_scale * full.hold)
    with pytest.raises(DataError, match="unknown reward term"):
        CFG.without("bogus")


def test_combine_batched():
    b = 64
    rng = np.random.default_rng(7)
    out = combine(
        pos_prev=rng.uniform(0, 0.5, b), pos_now=rng.uniform(0, 0.5, b),
        rot_prev=rng.uniform(0, 3, b), rot_now=rng.uniform(0, 3, b),
        joint_prev=rng.uniform(0, 1.5, b), joint_now=rng.uniform(0, 1.5, b),
        reach_sdf_prev=rng.uniform(-0.05, 0.5, (b, 6)),
        reach_sdf_now=rng.uniform(-0.05, 0.5, (b, 6)),
        hold_sdf_now=rng.uniform(-0.05, 0.5, (b, 6)),
        orient_prev=rng.uniform(0, math.pi, b), orient_now=rng.uniform(0, math.pi, b),
        jacobian_det=rng.uniform(0, 0.03, b),
        cfg=CFG,
    )
    assert out.total.shape == (b,)
    for name in ("pos_progress", "rot_progress", "joint_progress", "singularity"):
        vals = getattr(out, name)
        assert np.all(vals >= -1.0) and np.all(vals <= 1.0)
    for name in ("reach", "hold", "orient", "gate"):
        vals = getattr(out, name)
        assert np.all(vals >= 0.0) and np.all(vals <= 1.0)
    expected = (
        5000.0 * out.reached + 500.0 * out.orient + 25.0 * out.hold
        + out.pos_progress + out.rot_progress + out.gate * out.joint_progress
        + out.reach + out.singularity
    )
    np.testing.assert_allclose(out.total, expected, atol=1e-12)


def test_config_validation():
    with pytest.raises(DataError, match="strictly positive"):
        RewardConfig(dt=0.0)
    with pytest.raises(DataError, match="non-negative"):
        RewardConfig(hold_scale=-1.0)

import csv

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_weights, resize_oracle
from hydra_bench.attack import (
    PER_VIEW_MASK,
    RANDOM,
    SINGLE_VIEW_OPT,
    AttackConfig,
    Patch,
    PatchMask,
    attention_loss,
    baseline_patches,
    compute_patch_step,
    default_attention_targets,
    init_patch,
    load_patch,
    mask_from_config,
    mask_step,
    pcgrad_combine,
    place_patches,
    run_attention_attack,
    run_multiview_attack,
    save_patch,
    select_attack_frames,
    target_placements,
    torso_rect,
    update_patch,
)
from hydra_bench.detector import ATTN, CONV, AttentionSamplingState, input_gradients
from hydra_bench.detector.training import evaluate_loss
from hydra_bench.errors import (
    BadSize,
    ConfigInvalid,
    DimensionMismatch,
    EmptyPlacementList,
    ShapeMismatch,
    WrongVictim,
)
from hydra_bench.geometry import PatchPlacement


def _numpy_step(grad, placements, psize):
    g = np.asarray(grad)
    acc = sum(resize_oracle(g[p.view_id][:, p.rect[2]:p.rect[3], p.rect[0]:p.rect[1]], *psize) for p in placements)
    return acc / len(placements)


# --------------------------------------------------------------------------
# update rule


def test_patch_step_matches_numpy_oracle(rng):
    g = rng.normal(size=(4, 3, 40, 40))
    pls = [PatchPlacement(0, 0, (3, 20, 5, 30)), PatchPlacement(2, 1, (10, 16, 10, 14)),
           PatchPlacement(3, 0, (0, 40, 0, 40))]
    got = compute_patch_step(torch.tensor(g), pls, (8, 10)).numpy()
    np.testing.assert_allclose(got, _numpy_step(g, pls, (8, 10)), rtol=1e-9, atol=1e-12)


def test_patch_step_needs_placements(rng):
    with pytest.raises(EmptyPlacementList):
        compute_patch_step(torch.zeros(2, 3, 8, 8), [], (4, 4))


def test_mask_step_matches_numpy_oracle(rng):
    g = rng.normal(size=(3, 3, 30, 30))
    mask = PatchMask([(2, 12, 4, 20), (10, 30, 0, 7), (5, 9, 5, 9)], (30, 30))
    got = mask_step(torch.tensor(g), mask, (6, 6)).numpy()
    m = mask.masks
    oracle = sum(resize_oracle((g[d] * m[d])[:, r[2]:r[3], r[0]:r[1]], 6, 6) for d, r in enumerate(mask.rects)) / 3
    np.testing.assert_allclose(got, oracle, rtol=1e-9, atol=1e-12)


def test_update_clamps_and_checks_shape():
    p = Patch(np.full((2, 2, 3), 0.5))
    step = np.zeros((2, 2, 3))
    step[0, 0] = 1.0
    step[1, 1] = -1.0
    out = update_patch(p, step, 0.8).values
    assert out[0, 0, 0] == 1.0 and out[1, 1, 0] == 0.0 and out[0, 1, 0] == 0.5
    with pytest.raises(ShapeMismatch):
        update_patch(p, np.zeros((3, 2, 3)), 1.0)


def test_bad_sizes():
    with pytest.raises(BadSize):
        init_patch((1, 5))
    with pytest.raises(BadSize):
        baseline_patches(RANDOM, (4, 1))
    with pytest.raises(BadSize):
        Patch(np.zeros((4, 4)))


def test_one_iteration_against_numpy_oracle(small_scene, small_frames):
    w = random_weights(CONV, small_scene, seed=2)
    fr = small_frames[0]
    cfg = AttackConfig(alpha=0.3, n_epochs=1, psize=(10, 10), checkpoint_every=1)
    res = run_multiview_attack(w, [fr], cfg)
    pls = target_placements(fr, w.calibs, cfg.torso_scale)
    gray = init_patch((10, 10))
    grad = input_gradients(w, place_patches(fr.images, pls, gray), fr.truth)[0].numpy()
    step = _numpy_step(grad, pls, (10, 10))
    step /= np.abs(step).max()
    expected = np.clip(0.5 + 0.3 * step, 0, 1).transpose(1, 2, 0)
    np.testing.assert_allclose(res.patch.values, expected, rtol=1e-9, atol=1e-9)
    assert [e for e, _ in res.checkpoints] == [0, 1]
    assert len(res.log) == 1 and set(res.log[0]) >= {"epoch", "iter", "ground", "single_view_mean", "attention", "total"}


# --------------------------------------------------------------------------
# attention loss and surgery


def _state(loc, L=1, H=1, D=1, K=1):
    loc = torch.as_tensor(loc, dtype=torch.float64)
    Q = loc.shape[0]
    ref = loc
    offsets = torch.zeros(1, L, H, Q, D, K, 2, dtype=torch.float64)
    return AttentionSamplingState(ref, offsets)


def test_attention_loss_single_term():
    out = attention_loss(_state([[0.0, 0.0]]), [[3.0, 4.0]])
    assert float(out.total) == pytest.approx(25.0)
    assert (out.l_Q, out.D, out.K) == (1, 1, 1)


def test_attention_loss_normalization():
    st_ = _state([[0.0, 0.0], [0.0, 0.0]], H=2, D=2, K=2)
    out = attention_loss(st_, [[1.0, 0.0], [0.0, 2.0]])
    # per head: (1 + 4) for each of Q * D = 4 pairs, over Q * D * K = 8 -> 2.5; two heads
    assert float(out.total) == pytest.approx(5.0)
    assert out.terms.shape == (1, 1, 2, 2, 2, 2)


def test_attention_loss_offsets_and_mismatch():
    ref = torch.tensor([[1.0, 1.0]])
    offsets = torch.tensor([0.5, -1.0]).view(1, 1, 1, 1, 1, 1, 2)
    out = attention_loss(AttentionSamplingState(ref, offsets), [[1.5, 0.0]])
    assert float(out.total) == pytest.approx(0.0)
    with pytest.raises(DimensionMismatch):
        attention_loss(AttentionSamplingState(ref, offsets), [[0, 0], [1, 1]])


def test_default_targets_are_corners():
    t = default_attention_targets((24, 24), 4).tolist()
    assert t == [[0, 0], [23, 0], [0, 23], [23, 23]]


def test_pcgrad_orthogonal_is_plain_sum():
    out = pcgrad_combine([torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])])
    np.testing.assert_allclose(out.numpy(), [1.0, 1.0])


def test_pcgrad_conflicting_hand_value():
    out = pcgrad_combine([torch.tensor([1.0, 0.0]), torch.tensor([-1.0, 1.0])])
    np.testing.assert_allclose(out.numpy(), [0.5, 1.5])


def test_pcgrad_zero_task_is_identity(rng):
    g = torch.tensor(rng.normal(size=(2, 3, 4)))
    assert torch.equal(pcgrad_combine([g, torch.zeros_like(g)]), g)
    with pytest.raises(ShapeMismatch):
        pcgrad_combine([g, torch.zeros(3)])


@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_pcgrad_properties(seed, scale):
    r = np.random.default_rng(seed)
    g1, g2 = (torch.tensor(r.normal(size=6)) for _ in range(2))
    out = pcgrad_combine([g1, g2])
    assert float(out @ g1) >= -1e-9 * float(g1 @ g1)
    assert float(out @ g2) >= -1e-9 * float(g2 @ g2)
    np.testing.assert_allclose(pcgrad_combine([scale * g1, scale * g2]).numpy(), scale * out.numpy(),
                               rtol=1e-9, atol=1e-12)
    if float(g1 @ g2) >= 0:
        np.testing.assert_allclose(out.numpy(), (g1 + g2).numpy(), atol=1e-12)


# --------------------------------------------------------------------------
# placements


def test_torso_rect_hand_value():
    assert torso_rect((10, 30, 20, 70), (1.0, 0.6), (96, 96)) == (10, 30, 25, 55)
    assert torso_rect((-5, 3, 0, 10), (1.0, 0.6), (96, 96)) == (0, 3, 1, 7)
    assert torso_rect((200, 220, 0, 10), (1.0, 0.6), (96, 96)) is None


def test_target_placements_in_bounds_and_filtered(small_frames, small_scene):
    calibs = small_scene.rig()
    for fr in small_frames:
        pls = target_placements(fr, calibs)
        for p in pls:
            p.check_bounds((96, 96))
            assert fr.truth.visible[p.view_id, p.instance_id]
        only = target_placements(fr, calibs, views=[1])
        assert all(p.view_id == 1 for p in only)
        assert only == [p for p in pls if p.view_id == 1]


def test_select_attack_frames_is_seeded(small_frames):
    a = select_attack_frames(small_frames, 4, seed=3)
    b = select_attack_frames(small_frames, 4, seed=3)
    assert [f.frame_id for f in a] == [f.frame_id for f in b]
    assert len({f.frame_id for f in a}) == 4
    assert len(select_attack_frames(small_frames, 100, seed=3)) == len(small_frames)


# --------------------------------------------------------------------------
# loops


def test_zero_step_size_returns_gray(conv_random, small_frames):
    res = run_multiview_attack(conv_random, small_frames[:2], AttackConfig(alpha=0.0, n_epochs=2, psize=(8, 8)))
    np.testing.assert_array_equal(res.patch.values, 0.5)


def test_attention_attack_without_attention_term_matches_masked_multiview(small_scene, small_frames):
    w = random_weights(ATTN, small_scene, seed=6)
    cfg = AttackConfig(alpha=0.2, n_epochs=2, psize=(12, 12), mode=PER_VIEW_MASK, attention_weight=0.0)
    alg2 = run_attention_attack(w, small_frames[:3], cfg)
    fixed = mask_from_config(cfg, w.calibs).placements()
    alg1 = run_multiview_attack(w, small_frames[:3], cfg, placements=fixed, allow_mismatch=True)
    np.testing.assert_allclose(alg2.patch.values, alg1.patch.values, atol=1e-12)


def test_values_clamped_after_every_iteration(conv_random, small_frames):
    res = run_multiview_attack(conv_random, small_frames[:3], AttackConfig(alpha=5.0, n_epochs=2, psize=(8, 8)))
    assert len(res.patch_history_bounds) == len(res.log) > 0
    for lo, hi in res.patch_history_bounds:
        assert 0.0 <= lo and hi <= 1.0
    assert res.patch.values.min() == 0.0 or res.patch.values.max() == 1.0


@pytest.mark.parametrize("variant", [CONV, ATTN])
def test_attacks_are_deterministic(variant, small_scene, small_frames):
    w = random_weights(variant, small_scene, seed=1)
    cfg = AttackConfig(alpha=0.1, n_epochs=2, n_iter=2, psize=(8, 8), seed=4, mode=PER_VIEW_MASK)
    run = (lambda: run_multiview_attack(w, small_frames[:3], cfg, allow_mismatch=True)) if variant == CONV \
        else (lambda: run_attention_attack(w, small_frames[:3], cfg))
    a, b = run(), run()
    np.testing.assert_array_equal(a.patch.values, b.patch.values)
    assert a.log == b.log


def test_attention_attack_records_attention_loss(attn_random, small_frames):
    res = run_attention_attack(attn_random, small_frames[:2], AttackConfig(n_epochs=1, psize=(8, 8), mode=PER_VIEW_MASK))
    assert all(r["attention"] > 0 for r in res.log)


def test_victim_architecture_checked(conv_random, attn_random, small_frames):
    with pytest.raises(WrongVictim):
        run_multiview_attack(attn_random, small_frames[:1], AttackConfig(n_epochs=1))
    with pytest.raises(WrongVictim):
        run_attention_attack(conv_random, small_frames[:1], AttackConfig(n_epochs=1))


def test_stop_loss_ends_early(conv_random, small_frames):
    res = run_multiview_attack(conv_random, small_frames[:2],
                               AttackConfig(n_epochs=5, psize=(8, 8), stop_loss=0.0, checkpoint_every=0))
    assert {r["epoch"] for r in res.log} == {1}
    assert res.checkpoints[-1][0] == 1


def test_config_validation():
    with pytest.raises(ConfigInvalid):
        AttackConfig(alpha=-1)
    with pytest.raises(ConfigInvalid):
        AttackConfig(attention_loss_sign=0)
    with pytest.raises(ConfigInvalid, match="psize"):
        AttackConfig.from_dict({k: v for k, v in AttackConfig().to_dict().items() if k != "psize"})
    assert AttackConfig.from_dict(AttackConfig().to_dict()) == AttackConfig()


# --------------------------------------------------------------------------
# baselines and artifacts


def test_random_baseline_is_seeded():
    a, b, c = (baseline_patches(RANDOM, (6, 5), seed=s) for s in (1, 1, 2))
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert a.values.shape == (6, 5, 3) and 0 <= a.values.min() and a.values.max() <= 1


def test_single_view_baseline_raises_its_view_loss(small_scene, small_frames):
    w = random_weights(CONV, small_scene, seed=8)
    frames = small_frames[:3]
    patch = baseline_patches(SINGLE_VIEW_OPT, (10, 10), weights=w, frames=frames,
                             config=AttackConfig(alpha=0.2, n_epochs=3, psize=(10, 10)), view=0)

    def loss_with(p):
        placed = []
        for fr in frames:
            pls = target_placements(fr, w.calibs, views=[0])
            placed.append(type(fr)(fr.frame_id, place_patches(fr.images, pls, p), fr.truth))
        return evaluate_loss(w, placed).total

    assert loss_with(patch) > loss_with(init_patch((10, 10)))


def test_patch_artifacts_round_trip(tmp_path, conv_random, small_frames):
    res = run_multiview_attack(conv_random, small_frames[:1], AttackConfig(n_epochs=2, psize=(6, 6), checkpoint_every=1))
    save_patch(tmp_path, res.patch, {"schema_version": 1}, res.log, res.checkpoints)
    patch, manifest, ckpts = load_patch(tmp_path)
    np.testing.assert_array_equal(patch.values, res.patch.values)
    assert manifest == {"schema_version": 1}
    assert [e for e, _ in ckpts] == [0, 1, 2]
    with open(tmp_path / "loss_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "iter", "ground", "single_view_mean", "attention", "total"]
    assert len(rows) == 1 + len(res.log)
    assert (tmp_path / "patch.png").exists()

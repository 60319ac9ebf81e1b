import numpy as np
import pytest

import progressive_nerf.curriculum as cur
from progressive_nerf.autodiff import AdamState, Tape, adam_step
from progressive_nerf.curriculum import (
    NonFiniteLoss,
    TrainConfig,
    assign_stage,
    dataset_rays,
    expand_training_set,
    run_curriculum,
    stage_loss,
    stage_plan,
)
from progressive_nerf.field import FieldConfig, init_field, parameter_count
from progressive_nerf.render import render_rays
from progressive_nerf.scenegen import build_synthetic_scene, generate_orbit_dataset

SMALL = FieldConfig(width=8)


@pytest.fixture(scope="module")
def ds3():
    scene = build_synthetic_scene(0, bands=3, box_count=2)
    return generate_orbit_dataset(scene, 3, 3, width=6, height=5)


@pytest.mark.parametrize(
    "dist,expected", [(1.0, 4), (1.99, 4), (2.0, 3), (4.0, 2), (8.0, 1), (100.0, 1)]
)
def test_assign_stage(dist, expected):
    assert assign_stage(dist, 1.0, 4) == expected


def test_assign_stage_errors():
    with pytest.raises(ValueError):
        assign_stage(0.5, 1.0, 4)
    with pytest.raises(ValueError):
        assign_stage(1.0, 0.0, 4)


def test_stage_loss_single_stage_is_plain_sum():
    rng = np.random.default_rng(0)
    pred, gt = rng.uniform(size=(5, 3)), rng.uniform(size=(5, 3))
    assert stage_loss([pred], gt, np.ones(5, int), 1) == pytest.approx(((pred - gt) ** 2).sum(), rel=1e-14)


def test_single_ray_skips_shallower_heads():
    gt = np.zeros((1, 3))
    preds = [np.full((1, 3), 100.0), np.full((1, 3), 1.0), np.full((1, 3), 2.0)]
    per_head = []
    total = stage_loss(preds, gt, np.array([2]), 3, per_head=per_head)
    assert per_head == [0.0, 3.0, 12.0]
    assert total == 15.0


def test_two_rays_hand_sum():
    gt = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    p1 = np.array([[0.1, 0.0, 0.0], [1.0, 0.8, 1.0]])
    p2 = np.array([[0.0, 0.3, 0.0], [0.5, 1.0, 1.0]])
    # ray 0 is stage 1 (heads 1, 2); ray 1 is stage 2 (head 2 only)
    expected = 0.1**2 + 0.3**2 + 0.5**2
    assert stage_loss([p1, p2], gt, np.array([1, 2]), 2) == pytest.approx(expected, rel=1e-14)


def test_stage_loss_indicator_above_stage():
    with pytest.raises(ValueError):
        stage_loss([np.zeros((1, 3))], np.zeros((1, 3)), np.array([2]), 1)


def test_stage_loss_zero_iff_exact():
    gt = np.random.default_rng(1).uniform(size=(4, 3))
    assert stage_loss([gt, gt], gt, np.array([1, 2, 2, 1]), 2) == 0.0
    off = gt.copy()
    off[0, 0] += 1e-3
    assert stage_loss([gt, off], gt, np.array([1, 2, 2, 1]), 2) > 0


def test_stage_loss_on_tape_matches_float():
    rng = np.random.default_rng(2)
    preds = [rng.uniform(size=(6, 3)) for _ in range(3)]
    gt, ind = rng.uniform(size=(6, 3)), rng.integers(1, 4, 6)
    tape = Tape()
    node = stage_loss([tape.constant(p) for p in preds], gt, ind, 3, tape=tape)
    assert float(node.value) == pytest.approx(stage_loss(preds, gt, ind, 3), rel=1e-14)


def test_expand_training_set(ds3):
    pixels = 6 * 5
    train_per_stage = 2
    first = expand_training_set(ds3, 1)
    assert set(first.stages) == {1}
    assert len(first) == train_per_stage * pixels
    assert len(expand_training_set(ds3, 2)) == 2 * train_per_stage * pixels
    assert len(expand_training_set(ds3, 3)) == len(dataset_rays(ds3)) == 3 * train_per_stage * pixels
    with pytest.raises(ValueError):
        expand_training_set(ds3, 4)


def test_stage_plans():
    full = TrainConfig()
    assert stage_plan(2, 3, full) == cur.StagePlan(2, 2, [(1, True), (2, True)])
    p = stage_plan(2, 3, TrainConfig(ablations=("no_growing",)))
    assert (p.depth, p.pool_stage, p.heads) == (3, 2, [(3, True)])
    p = stage_plan(1, 3, TrainConfig(ablations=("no_data_schedule",)))
    assert (p.depth, p.pool_stage, p.heads) == (3, 3, [(1, True), (2, True), (3, True)])
    p = stage_plan(3, 3, TrainConfig(ablations=("no_multilevel_sup",)))
    assert p.heads == [(1, False), (2, False), (3, False)]


def test_unknown_ablation():
    with pytest.raises(ValueError, match="no_growing"):
        TrainConfig(ablations=("nope",))


def tiny(**kw):
    base = dict(iters_per_stage=3, batch_size=16, n_samples=8, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def capture_batches(monkeypatch):
    seen = []
    original = cur._render

    def spy(tape, field, batch, head, train, rng):
        renders = original(tape, field, batch, head, train, rng)
        seen.append((field.depth, batch.stages.copy(), [r.color.value.copy() for r in renders]))
        return renders

    monkeypatch.setattr(cur, "_render", spy)
    return seen


def test_curriculum_schedule(ds3, monkeypatch):
    seen = capture_batches(monkeypatch)
    field, log = run_curriculum(ds3, SMALL, tiny())
    assert field.depth == 3
    assert len(seen) == 9
    iters = sorted({r["iteration"] for r in log.records})
    assert iters == list(range(9))
    for i, (depth, stages, _) in enumerate(seen):
        L = i // 3 + 1
        assert depth == L
        assert stages.max() <= L
    assert log.param_counts == [parameter_count(field.config, d) for d in (1, 2, 3)]
    heads_at_stage = {(r["stage"], r["head"]) for r in log.records}
    assert heads_at_stage == {(1, 1), (2, 1), (2, 2), (3, 1), (3, 2), (3, 3)}


def test_growth_is_function_preserving_in_training(ds3, monkeypatch):
    seen = capture_batches(monkeypatch)
    run_curriculum(ds3, SMALL, tiny())
    for first_after_grow in (3, 6):
        colors = seen[first_after_grow][2]
        np.testing.assert_array_equal(colors[-1], colors[-2])


def test_no_growing_keeps_parameter_count(ds3):
    _, log = run_curriculum(ds3, SMALL, tiny(ablations=("no_growing",)))
    assert len(set(log.param_counts)) == 1
    assert {r["head"] for r in log.records} == {3}


def test_no_data_schedule_samples_everything(ds3, monkeypatch):
    seen = capture_batches(monkeypatch)
    run_curriculum(ds3, SMALL, tiny(ablations=("no_data_schedule",), batch_size=64))
    assert seen[0][1].max() == 3
    assert all(depth == 3 for depth, _, _ in seen)


def test_deterministic_runs(ds3):
    a, la = run_curriculum(ds3, SMALL, tiny())
    b, lb = run_curriculum(ds3, SMALL, tiny())
    np.testing.assert_array_equal(a.params.values, b.params.values)
    np.testing.assert_array_equal(la.losses(), lb.losses())


def test_single_stage_matches_reference_loop():
    scene = build_synthetic_scene(1, bands=2, box_count=1)
    ds = generate_orbit_dataset(scene, 1, 2, width=5, height=4)
    train = tiny(iters_per_stage=4)
    _, log = run_curriculum(ds, SMALL, train)

    # hand-rolled single-head loop with the same random stream
    rng = np.random.default_rng(train.seed)
    field = init_field(FieldConfig(width=8, L_max=1), rng)
    pool = dataset_rays(ds)
    state = AdamState.for_params(field.params, decay_steps=train.iters_per_stage)
    ref = []
    for _ in range(train.iters_per_stage):
        batch = pool.subset(np.sort(rng.integers(0, len(pool), size=train.batch_size)))
        tape = Tape(field.params)
        color = render_rays(tape, field, batch.rays(), 1, train.n_samples, rng, True)[-1].color
        loss = tape.sum(tape.square(tape.sub(color, batch.colors)))
        ref.append(float(loss.value))
        field.params, state = adam_step(field.params, tape.backward(loss), state)
    np.testing.assert_array_equal(log.losses(), ref)


def test_loss_decreases(ds3):
    _, log = run_curriculum(ds3, SMALL, tiny(iters_per_stage=40, batch_size=64, base_lr=5e-3, lr_final=5e-4))
    head1 = log.losses(1)[:40]
    assert head1[-10:].mean() < head1[:10].mean()


def test_non_finite_loss_aborts(ds3):
    bad = generate_orbit_dataset(build_synthetic_scene(0, bands=2, box_count=1), 1, 2, width=4, height=4)
    for v in bad.views:
        v.image = v.image.copy()
        v.image[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLoss) as info:
        run_curriculum(bad, SMALL, tiny(batch_size=256))
    snap = info.value.snapshot
    assert snap["iteration"] == 0 and snap["stage"] == 1 and "field" in snap


def test_evaluate_hook(ds3):
    calls = []
    _, log = run_curriculum(ds3, SMALL, tiny(iters_per_stage=1), evaluate=lambda f, L: calls.append(L) or {"x": L})
    assert calls == [1, 2, 3]
    assert [m["x"] for m in log.stage_metrics] == [1, 2, 3]

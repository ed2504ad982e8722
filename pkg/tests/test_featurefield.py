import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from superseg.errors import DegenerateRay, EmptyBatch, NonFiniteLoss, OutOfBounds, ValidationError
from superseg.featurefield import (
    FeatureField,
    Ray,
    Supervision,
    TrainConfig,
    density_at,
    inverse_softplus,
    iter_batches,
    loss_consistency_batch,
    loss_consistency_pair,
    loss_density,
    loss_lang,
    query,
    query_all_scales,
    query_points,
    render_ray,
    render_rays,
    softplus,
    train,
)
from superseg.superpoints import SuperpointPartition

from gradcheck import certify, default_check_config, loss_fns, small_batch, small_field
from oracles import consistency_batch_oracle, trilinear_oracle, two_sample_render_oracle


def random_field(seed=0, dims=(5, 4, 6), scales=2, dim=3, h=0.25):
    rng = np.random.default_rng(seed)
    f = FeatureField.create(rng.normal(size=3), h, dims, scales, dim, seed=seed)
    f.embeddings[:] = rng.normal(size=f.embeddings.shape)
    f.density_raw[:] = rng.normal(size=dims)
    return f


def test_softplus_roundtrip():
    y = np.array([1e-6, 0.005, 0.2, 1.0, 30.0])
    np.testing.assert_allclose(softplus(inverse_softplus(y)), y, rtol=1e-12)


def test_query_at_node_and_midpoint():
    f = random_field()
    x = f.node_position(2, 1, 3)
    np.testing.assert_allclose(query(f, x, 1), f.embeddings[1, 2, 1, 3], atol=1e-12)
    mid = 0.5 * (f.node_position(2, 1, 3) + f.node_position(3, 1, 3))
    np.testing.assert_allclose(query(f, mid, 0),
                               0.5 * (f.embeddings[0, 2, 1, 3] + f.embeddings[0, 3, 1, 3]), atol=1e-12)


def test_query_matches_trilinear_oracle():
    f = random_field(1)
    rng = np.random.default_rng(5)
    pts = f.origin + rng.random((200, 3)) * (np.array(f.dims) - 1) * f.voxel_size
    got = query_points(f, pts, 1)
    want = np.array([trilinear_oracle(f.origin, f.voxel_size, f.embeddings[1], p) for p in pts])
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_query_bounds():
    f = random_field()
    query(f, f.upper, 0)  # closed box: upper corner is valid
    with pytest.raises(OutOfBounds):
        query(f, f.upper + 1e-3, 0)
    with pytest.raises(ValidationError):
        query(f, f.origin, 2)


def test_density_nonnegative_everywhere():
    f = random_field()
    f.density_raw[:] = -50.0
    pts = f.origin + np.random.default_rng(0).random((100, 3)) * (np.array(f.dims) - 1) * f.voxel_size
    assert np.all(density_at(f, pts) >= 0)


def opaque_voxel_field(e):
    f = FeatureField.create(np.zeros(3), 0.1, (5, 5, 5), 1, len(e), init_density=1e-9)
    f.embeddings[:] = 0.0
    f.embeddings[0, 2, 2, 2] = e
    f.density_raw[2, 2, 2] = 1e4  # softplus(1e4) = 1e4
    return f


def test_render_single_opaque_voxel():
    e = np.array([0.3, -1.2, 0.5, 2.0])
    f = opaque_voxel_field(e)
    ray = Ray([0.0, 0.2, 0.2], [1.0, 0, 0], 0.0, 0.4, 64)
    emb, ws = render_ray(f, ray, 0)
    assert 1.0 - float(emb @ (e / np.linalg.norm(e))) <= 1e-5
    assert ws == pytest.approx(1.0, abs=1e-6)


def test_render_zero_density_is_degenerate():
    f = FeatureField.create(np.zeros(3), 0.1, (4, 4, 4), 1, 3, init_density=1e-9)
    f.density_raw[:] = -800.0  # softplus underflows to 0
    with pytest.raises(DegenerateRay):
        render_ray(f, Ray([0.0, 0.1, 0.1], [1.0, 0, 0], 0.0, 0.3, 16), 0)


def test_render_two_samples_closed_form():
    # nodes at x = -0.05, 0.05, 0.15, 0.25; samples land on x = 0.05 and 0.15
    f = FeatureField.create(np.array([-0.05, 0.0, 0.0]), 0.1, (4, 2, 2), 1, 3, init_density=1.0)
    f.density_raw[1] = inverse_softplus(1.0)
    f.density_raw[2] = inverse_softplus(2.0)
    e1, e2 = np.array([1.0, 0.0, 0.5]), np.array([-0.2, 1.0, 0.0])
    f.embeddings[0, 1] = e1
    f.embeddings[0, 2] = e2
    raw, ws = render_rays(f, [[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]], 0.0, 0.2, 2, 0)
    want_raw, want_ws = two_sample_render_oracle([1.0, 2.0], [0.1, 0.1], [e1, e2])
    np.testing.assert_allclose(raw[0], want_raw, rtol=1e-12)
    assert ws[0] == pytest.approx(want_ws, rel=1e-12)
    emb, _ = render_ray(f, Ray([0.0, 0, 0], [1.0, 0, 0], 0.0, 0.2, 2), 0)
    np.testing.assert_allclose(emb, want_raw / np.linalg.norm(want_raw), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_render_weight_sum_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    f = random_field(seed % 7)
    f.density_raw[:] = rng.normal(0, 5, size=f.dims)
    o = f.origin + rng.random((20, 3)) * (np.array(f.dims) - 1) * f.voxel_size
    d = rng.normal(size=(20, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    _, ws = render_rays(f, o, d, 0.0, 2.0, 32, 0)
    assert np.all((ws >= 0) & (ws <= 1))


def test_ray_validation():
    with pytest.raises(ValidationError):
        Ray([0, 0, 0], [1.0, 1.0, 0], 0.0, 1.0)
    with pytest.raises(ValidationError):
        Ray([0, 0, 0], [1.0, 0, 0], 1.0, 1.0)


def test_loss_lang_examples():
    a = np.array([0.6, 0.8])
    assert loss_lang(a, a, 1.0) == pytest.approx(-1.0)
    assert loss_lang([1.0, 0], [0, 1.0], 1.0) == 0.0
    assert loss_lang([1.0, 0], [-1.0, 0], 2.0) == 2.0


def test_loss_consistency_pair_examples():
    assert loss_consistency_pair([1.0, 2.0], [1.0, 2.0], 0.3) == 0.0
    d = 0.5
    assert loss_consistency_pair([0.0, 0.0], [d, 0.0], d) == pytest.approx(d * d / 2)
    assert loss_consistency_pair([0.0, 0.0], [d + 1e-12, 0.0], d) == pytest.approx(d * d / 2)
    assert loss_consistency_pair([1.0, 0], [0, 1.0], 0.5) == pytest.approx(0.5 * math.sqrt(2) - 0.125)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 3.0), st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_huber_monotone_and_capped(delta, r1, r2):
    lo, hi = sorted([r1, r2])
    f_lo = loss_consistency_pair([0.0], [lo], delta)
    f_hi = loss_consistency_pair([0.0], [hi], delta)
    assert f_hi >= f_lo >= 0
    if lo > delta:
        assert f_hi - f_lo <= delta * (hi - lo) + 1e-12


def test_consistency_batch_matches_double_loop():
    f = random_field(2)
    rng = np.random.default_rng(3)
    span = (np.array(f.dims) - 1) * f.voxel_size
    a = f.origin + rng.random((3, 3)) * span
    b = f.origin + rng.random((3, 3)) * span
    qa, qb = query_all_scales(f, a), query_all_scales(f, b)
    want = consistency_batch_oracle(qa.tolist(), qb.tolist(), 0.8)
    assert loss_consistency_batch(f, a, b, 0.8) == pytest.approx(want, rel=1e-12)


def test_consistency_batch_edge_cases():
    f = random_field(2)
    p = f.node_position(1, 1, 1)
    assert loss_consistency_batch(f, [p], [p], 0.25) == 0.0
    q = f.node_position(2, 1, 1)
    single = FeatureField(f.origin, f.voxel_size, f.density_raw, f.embeddings[:1])
    assert loss_consistency_batch(single, [p], [q], 0.25) == pytest.approx(
        loss_consistency_pair(query(single, p, 0), query(single, q, 0), 0.25))
    with pytest.raises(EmptyBatch):
        loss_consistency_batch(f, np.zeros((0, 3)), np.zeros((0, 3)), 0.25)


def test_loss_density_examples():
    f = FeatureField.create(np.zeros(3), 1.0, (2, 2, 2), 1, 2, init_density=1.0)
    assert loss_density(f, [[0.5, 0.5, 0.5]]) == pytest.approx(0.0, abs=1e-15)
    f.density_raw[:] = -800.0
    assert loss_density(f, [[0.5, 0.5, 0.5]]) == 1.0
    f.density_raw[0] = inverse_softplus(0.5)
    f.density_raw[1] = inverse_softplus(1.0)
    assert loss_density(f, [[0, 0, 0], [1, 1, 1]]) == pytest.approx(0.125, rel=1e-12)
    with pytest.raises(OutOfBounds):
        loss_density(f, [[2.0, 0, 0]])
    with pytest.raises(EmptyBatch):
        loss_density(f, np.zeros((0, 3)))


@pytest.mark.parametrize("name", ["lang", "consistency", "density", "staged_sum"])
def test_gradients_match_central_differences(name):
    f = small_field(4)
    fn = loss_fns(small_batch(4), default_check_config())[name]
    rel, small_abs, n = certify(fn, f, np.random.default_rng(0))
    assert n >= 64
    assert rel <= 1e-4
    assert small_abs <= 1e-6


def test_staged_sum_gradient_at_default_weights():
    f = small_field(5)
    fn = loss_fns(small_batch(5), TrainConfig(iterations=10))["staged_sum"]
    rel, _, n = certify(fn, f, np.random.default_rng(1))
    assert n >= 64 and rel <= 1e-4


def test_train_config_stages():
    c = TrainConfig(iterations=100)
    assert (c.stage1, c.stage2) == (10, 30)
    assert [c.stage(i) for i in (0, 9, 10, 29, 30, 99)] == [1, 1, 2, 2, 3, 3]
    with pytest.raises(ValidationError):
        TrainConfig(iterations=10, stage1=5, stage2=3)
    with pytest.raises(ValidationError):
        TrainConfig(lambda_c=-1)


def plane_supervision(n=400, seed=0, dim=4):
    rng = np.random.default_rng(seed)
    pos = np.column_stack([rng.uniform(0.3, 0.7, (n, 2)), np.full(n, 0.5)])
    nrm = np.tile([0.0, 0.0, 1.0], (n, 1))
    tgt = np.tile(np.eye(dim)[0], (n, 1))
    return Supervision(pos, nrm, tgt, ray_offset=0.2, ray_margin=0.05)


def test_train_zero_iterations_is_identity():
    f = small_field(0)
    sup = plane_supervision()
    out, hist = train(f, sup, SuperpointPartition(np.zeros(len(sup.positions), dtype=int)),
                      TrainConfig(iterations=0))
    assert hist == []
    np.testing.assert_array_equal(out.density_raw, f.density_raw)
    np.testing.assert_array_equal(out.embeddings, f.embeddings)


def test_density_only_training_reaches_closed_form_fit():
    # with only the density term the objective is minimized by sigma = 1 at
    # every node touching a surface point, giving loss exactly 0
    f = FeatureField.create(np.zeros(3), 1.0 / 7, (8, 8, 8), 1, 4, init_density=0.2)
    sup = plane_supervision()
    part = SuperpointPartition(np.zeros(len(sup.positions), dtype=int))
    cfg = TrainConfig(iterations=300, lambda_lang=0.0, lambda_c=0.0, lambda_d=1.0, lr=20.0,
                      stage1=300, stage2=300, density_points_per_batch=400)
    out, hist = train(f, sup, part, cfg)
    closed_form = f.copy()
    closed_form.density_raw[:] = inverse_softplus(1.0)
    assert loss_density(closed_form, sup.positions) == pytest.approx(0.0, abs=1e-15)
    assert loss_density(out, sup.positions) < 1e-3
    assert hist[-1].density < hist[0].density


def test_train_is_deterministic_and_staged():
    f = small_field(1)
    sup = plane_supervision()
    part = SuperpointPartition((sup.positions[:, 0] > 0.5).astype(int))
    cfg = TrainConfig(iterations=20, rays_per_batch=32, density_points_per_batch=64,
                      pairs_per_batch=32, lambda_d=1.0, lambda_c=1.0)
    a, ha = train(f, sup, part, cfg)
    b, hb = train(f, sup, part, cfg)
    np.testing.assert_array_equal(a.embeddings, b.embeddings)
    np.testing.assert_array_equal(a.density_raw, b.density_raw)
    assert [h.stage for h in ha] == [1, 1] + [2] * 4 + [3] * 14
    assert ha[0].lang is None and ha[2].consistency is None and ha[-1].consistency is not None


def test_pairs_stay_within_superpoints():
    sup = plane_supervision(200)
    labels = (sup.positions[:, 0] > 0.5).astype(int)
    labels[0] = 2  # singleton
    part = SuperpointPartition.from_labels(labels)
    batch = next(iter_batches(sup, part, TrainConfig(pairs_per_batch=500), 2))
    lookup = {tuple(p): part.assignment[i] for i, p in enumerate(sup.positions)}
    for a, b in zip(batch.pair_a, batch.pair_b):
        assert lookup[tuple(a)] == lookup[tuple(b)]
        assert not np.array_equal(a, b) or part.sizes[lookup[tuple(a)]] == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts_with_iteration():
    f = small_field(0)
    f.density_raw[0, 0, 0] = np.nan
    sup = plane_supervision()
    sup.positions[:] = 0.0  # all surface points read the NaN node
    part = SuperpointPartition(np.zeros(len(sup.positions), dtype=int))
    with pytest.raises(NonFiniteLoss) as err:
        train(f, sup, part, TrainConfig(iterations=5))
    assert err.value.iteration == 0

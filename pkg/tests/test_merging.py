import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from superseg.errors import DegenerateField, TooFewSuperpoints, ValidationError, ZeroVector
from superseg.featurefield import FeatureField
from superseg.geometry import IGNORE
from superseg.merging import (
    LabelBank,
    MergeConfig,
    affinity,
    affinity_pair,
    assign_classes,
    lower_median_index,
    pair_score,
    point_relevancy,
    sample_superpoint,
    scaled_relevancy,
    select_pools,
    superpoint_relevancy,
)
from superseg.superpoints import CutParams, SuperpointPartition, build_superpoints
from superseg.synth import EmbeddingModel, GridParams, ObjectSpec, SceneSpec, generate_scene, make_prototypes, paint_field

from oracles import relevancy_oracle

E = np.eye(3)


def logistic(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_pair_score_examples():
    assert pair_score(E[0], 3 * E[0]) == pytest.approx(math.e)
    assert pair_score(E[0], E[1]) == pytest.approx(1.0)
    assert pair_score(E[0], -E[0]) == pytest.approx(math.exp(-1))
    with pytest.raises(ZeroVector):
        pair_score(E[0], np.zeros(3))


def test_point_relevancy_examples():
    assert point_relevancy(E[0], E[0], [E[1]]) == pytest.approx(logistic(1.0), abs=1e-12)
    assert point_relevancy(E[2], E[0], [E[1], -E[1]]) == pytest.approx(0.5)
    assert point_relevancy(E[0], E[0], [E[1], E[0]]) <= 0.5
    assert point_relevancy(E[0], E[0], [E[1]]) == pytest.approx(relevancy_oracle(E[0], E[0], [E[1]]))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(2, 8))
def test_relevancy_is_logistic_of_margin(seed, k, d):
    rng = np.random.default_rng(seed)
    f, pos = rng.normal(size=d), rng.normal(size=d)
    negs = rng.normal(size=(k, d))
    unit = lambda v: v / np.linalg.norm(v)
    margin = unit(f) @ unit(pos) - max(unit(f) @ unit(n) for n in negs)
    r = point_relevancy(f, pos, negs)
    assert abs(r - logistic(margin)) <= 1e-12
    assert 0 < r < 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_relevancy_increasing_in_positive_similarity(seed):
    rng = np.random.default_rng(seed)
    negs = rng.normal(size=(3, 4))
    f = rng.normal(size=4)
    f /= np.linalg.norm(f)
    # rotate the positive toward f: similarity grows monotonically with t
    other = rng.normal(size=4)
    other -= (other @ f) * f
    other /= np.linalg.norm(other)
    ts = np.linspace(0.05, math.pi - 0.05, 8)
    r = [point_relevancy(f, math.cos(t) * f + math.sin(t) * other, negs) for t in ts]
    assert all(a > b for a, b in zip(r, r[1:]))


def test_affinity_pair_examples():
    assert affinity_pair(E[0], E[0], [E[1], E[2]]) == pytest.approx(logistic(1.0))
    assert affinity_pair(E[2], E[0], [E[1]]) == pytest.approx(0.5)
    assert affinity_pair(E[1], E[0], [E[2], E[0]]) <= 0.5


def test_lower_median():
    assert lower_median_index(np.array([0.8, 0.2, 0.6, 0.4])) == 3  # 0.4
    assert lower_median_index(np.array([0.9, 0.2, 0.6])) == 2
    assert lower_median_index(np.array([0.5])) == 0
    assert lower_median_index(np.array([0.5, 0.5, 0.5, 0.5])) == 1


def three_point_field(scores):
    """Field whose three x-axis nodes hold embeddings with prescribed relevancy.

    With positive e0 and the single negative -e0, an embedding (c, s, 0)
    scores logistic(2c).
    """
    f = FeatureField.create(np.zeros(3), 1.0, (3, 2, 2), 1, 3, init_density=1.0)
    f.embeddings[:] = E[2]
    for i, r in enumerate(scores):
        c = math.log(r / (1 - r)) / 2
        f.embeddings[0, i, :, :] = [c, math.sqrt(1 - c * c), 0.0]
    pts = np.array([[i, 0.0, 0.0] for i in range(3)])
    return f, pts


def test_superpoint_relevancy_takes_median_sample():
    f, pts = three_point_field([0.2, 0.85, 0.6])
    part = SuperpointPartition(np.zeros(3, dtype=int))
    r, emb = superpoint_relevancy(f, pts, part, 0, E[0], [-E[0]], MergeConfig(n_points=3))
    assert r == pytest.approx(0.6, abs=1e-12)
    np.testing.assert_allclose(emb, f.embeddings[0, 2, 0, 0])


def test_superpoint_relevancy_single_member_and_degenerate():
    f, pts = three_point_field([0.2, 0.85, 0.6])
    part = SuperpointPartition(np.array([0, 1, 0]))
    r, emb = superpoint_relevancy(f, pts, part, 1, E[0], [-E[0]])
    assert r == pytest.approx(0.85, abs=1e-12)
    f.embeddings[:] = 0.0
    with pytest.raises(DegenerateField):
        superpoint_relevancy(f, pts, part, 1, E[0], [-E[0]])


def test_sample_superpoint_seeds_at_lowest_member():
    pts = np.array([[0.0, 0, 0], [5.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
    np.testing.assert_array_equal(sample_superpoint(pts, np.array([3, 1, 2]), 2), [1, 2])
    np.testing.assert_array_equal(sample_superpoint(pts, np.array([3, 2]), 16), [2, 3])


def test_affinity_hand_computed():
    # N_a = 2, positives are superpoints 0 and 1 (R 0.9, 0.8), negatives 2 and 3
    rel = np.array([0.9, 0.8, 0.1, 0.2, 0.5])
    emb = np.array([E[0], E[1], E[2], E[2], E[0]])
    want = (0.9 * affinity_pair(E[0], E[0], emb[[2, 3]]) + 0.8 * affinity_pair(E[0], E[1], emb[[2, 3]])) / 2
    assert affinity(4, rel, emb, MergeConfig(n_affinity=2)) == pytest.approx(want, rel=1e-12)
    norm = affinity(4, rel, emb, MergeConfig(n_affinity=2, normalized_affinity=True))
    assert norm == pytest.approx(want * 2 / 1.7, rel=1e-12)


def test_affinity_arithmetic_with_fixed_pair_scores():
    # f_sp = e0, negatives orthogonal to it, positive j at cosine logit(p_j)
    # so that its pair score is exactly p_j
    f = np.zeros((5, 4))
    for j, p in enumerate((0.7, 0.6)):
        m = math.log(p / (1 - p))
        f[j] = [m, math.sqrt(1 - m * m), 0, 0]
    f[2], f[3], f[4] = [0, 0, 1, 0], [0, 0, 0, 1], [1, 0, 0, 0]
    rel = np.array([0.9, 0.8, 0.1, 0.2, 0.5])
    assert affinity_pair(f[4], f[0], f[[2, 3]]) == pytest.approx(0.7, abs=1e-12)
    a = affinity(4, rel, f, MergeConfig(n_affinity=2))
    assert a == pytest.approx(0.555, abs=1e-12)


def test_affinity_constant_average_and_too_few():
    rel = np.array([1.0, 1.0, 0.3, 0.3])
    emb = np.array([E[0], E[0], E[1], E[1]])
    assert affinity(0, rel, emb, MergeConfig(n_affinity=1)) == pytest.approx(logistic(1.0))
    # probe equidistant from positives and negatives: every pair scores 0.5
    sym = np.array([E[0], E[0], E[2], E[2], E[1]])
    assert affinity(4, np.append(rel, 0.5), sym, MergeConfig(n_affinity=2)) == pytest.approx(0.5)
    with pytest.raises(TooFewSuperpoints):
        select_pools(np.array([0.1, 0.2, 0.3]), 2)


def test_select_pools_ties_by_lower_id():
    top, bottom = select_pools(np.array([0.5, 0.9, 0.5, 0.1, 0.5]), 2)
    np.testing.assert_array_equal(top, [1, 0])
    np.testing.assert_array_equal(bottom, [3, 0])


def test_scaled_relevancy_examples():
    assert scaled_relevancy(0.7, 0.3, 0.3, 1.5) == pytest.approx(1.05)
    assert scaled_relevancy(0.5, 0.5, 0.3, 1.0) == pytest.approx(0.6)
    r = np.random.default_rng(0).random((3, 50))
    np.testing.assert_array_equal(scaled_relevancy(r[0], r[1], r[2], 2.0),
                                  2.0 * scaled_relevancy(r[0], r[1], r[2], 1.0))


def test_config_and_bank_validation():
    with pytest.raises(ValidationError):
        MergeConfig(n_points=0)
    with pytest.raises(ValidationError):
        MergeConfig(weight=0.0)
    with pytest.raises(ValidationError):
        LabelBank(("a", "a"), np.stack([E[0], E[1]]), E[2:])
    with pytest.raises(ValidationError):
        LabelBank(("a",), E[:1], np.zeros((0, 3)))
    with pytest.raises(ValidationError):
        LabelBank(("a",), 2 * E[:1], E[1:2])


def two_class_scene(seed=0):
    # floor plus floating boxes, separated so no superpoint straddles classes
    objects = [ObjectSpec("plane", (1.5, 1.5, 0.0), (3.0, 3.0), 0, "floor")]
    for i, (x, y) in enumerate([(0.8, 0.8), (2.2, 0.8), (1.5, 2.2)]):
        objects.append(ObjectSpec("box", (x, y, 0.6), (0.5, 0.5, 0.5), 1, "box"))
    return SceneSpec(objects, (3.0, 3.0, 1.0), points_per_m2=150, sigma_geom=0.0, seed=seed)


@pytest.fixture(scope="module")
def painted():
    cloud = generate_scene(two_class_scene())
    model = EmbeddingModel(make_prototypes(2, 8, seed=1), sigma_emb=0.0, seed=1)
    field, bank, _ = paint_field(cloud, model, GridParams(resolution=48, scale_count=2),
                                 ["floor", "box"], paint=True)
    part = build_superpoints(cloud, CutParams(min_size=5))
    return cloud, field, bank, part


def test_painted_scene_labels_exact(painted):
    cloud, field, bank, part = painted
    assert part.superpoint_count >= 10
    res = assign_classes(field, cloud.positions, part, bank)
    np.testing.assert_array_equal(res.point_labels, cloud.gt_labels)
    finite = np.isfinite(res.relevancy)
    assert finite.all()
    assert np.all((res.relevancy > 0) & (res.relevancy < 1))
    assert np.all((res.affinity > 0) & (res.affinity < 1))
    no_aff = assign_classes(field, cloud.positions, part, bank, MergeConfig(use_affinity=False))
    np.testing.assert_array_equal(no_aff.point_labels, cloud.gt_labels)
    np.testing.assert_array_equal(no_aff.superpoint_labels, np.argmax(no_aff.relevancy, axis=1))


def test_labels_invariant_to_weight_and_threads(painted):
    cloud, field, bank, part = painted
    base = assign_classes(field, cloud.positions, part, bank)
    for w in (0.1, 7.3, 10.0):
        res = assign_classes(field, cloud.positions, part, bank, MergeConfig(weight=w))
        np.testing.assert_array_equal(res.superpoint_labels, base.superpoint_labels)
    threaded = assign_classes(field, cloud.positions, part, bank, threads=3)
    for name in ("relevancy", "affinity", "scaled", "superpoint_labels"):
        np.testing.assert_array_equal(getattr(threaded, name), getattr(base, name))


def test_duplicate_class_loses_ties_to_first(painted):
    cloud, field, bank, part = painted
    dup = LabelBank(bank.names + ("floor again",), np.vstack([bank.positives, bank.positives[:1]]),
                    bank.negatives)
    base = assign_classes(field, cloud.positions, part, bank)
    res = assign_classes(field, cloud.positions, part, dup)
    np.testing.assert_array_equal(res.superpoint_labels, base.superpoint_labels)


def test_single_class_bank(painted):
    cloud, field, bank, part = painted
    one = LabelBank(("only",), bank.positives[:1], bank.negatives)
    res = assign_classes(field, cloud.positions, part, one)
    assert np.all(res.point_labels == 0)


def test_degenerate_superpoints_are_ignored():
    f, pts = three_point_field([0.2, 0.85, 0.6])
    f.embeddings[0, 0] = 0.0  # x=0 nodes: point 0 reads a zero embedding
    part = SuperpointPartition(np.array([0, 1, 1]))
    bank = LabelBank(("a", "b"), np.stack([E[0], E[1]]), -E[:1])
    res = assign_classes(f, pts, part, bank, MergeConfig(use_affinity=False))
    assert res.point_labels[0] == IGNORE and res.superpoint_labels[1] != IGNORE

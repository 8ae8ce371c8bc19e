import numpy as np
import pytest

from conftest import random_cloud
from wsseg.augment import RigidTransform, apply_transform, sample_transform, transform_matrix
from wsseg.graph import pairwise_distance


def test_identity_draw_is_exact():
    assert np.array_equal(transform_matrix(0.0, 1, 1, 1), np.eye(3))


def test_quarter_turn():
    r = transform_matrix(np.pi / 2, 1, 1, 1)
    np.testing.assert_allclose(r, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
    c = random_cloud(0, n=3).replace(xyz=np.array([[1.0, 0, 0], [0, 0, 2], [0, 1, 0]]))
    out = apply_transform(c, RigidTransform.from_draw(np.pi / 2, 1, 1, 1))
    np.testing.assert_allclose(out.xyz, [[0, 1, 0], [0, 0, 2], [-1, 0, 0]], atol=1e-15)


def test_x_mirror():
    assert np.array_equal(transform_matrix(0.0, 0, 1, 1), np.diag([-1.0, 1.0, 1.0]))
    assert np.array_equal(transform_matrix(0.0, 1, 0, 1), np.diag([1.0, -1.0, 1.0]))


def test_c_zero_swaps_x_and_y():
    assert np.array_equal(transform_matrix(0.0, 1, 1, 0), [[0, 1, 0], [1, 0, 0], [0, 0, 1]])


def test_sampled_transforms_are_orthogonal_and_keep_z():
    for s in range(200):
        t = sample_transform(s)
        r = t.matrix
        assert np.abs(r.T @ r - np.eye(3)).max() < 1e-10
        assert abs(abs(np.linalg.det(r)) - 1) < 1e-10
        assert np.array_equal(r[:, 2], [0, 0, 1]) and np.array_equal(r[2], [0, 0, 1])
        assert 0 <= t.theta < 2 * np.pi and {t.a, t.b, t.c} <= {0, 1}
        np.testing.assert_array_equal(r, transform_matrix(t.theta, t.a, t.b, t.c))


def test_sampling_is_deterministic_and_covers_all_bits():
    assert np.array_equal(sample_transform(3).matrix, sample_transform(3).matrix)
    bits = {(t.a, t.b, t.c) for t in map(sample_transform, range(200))}
    assert len(bits) == 8


def test_distances_labels_rgb_preserved():
    c = random_cloud(2, n=25, rgb=True)
    out = apply_transform(c, sample_transform(7))
    np.testing.assert_allclose(pairwise_distance(out), pairwise_distance(c), atol=1e-10)
    assert np.array_equal(out.labels, c.labels) and np.array_equal(out.rgb, c.rgb)


def test_identity_leaves_cloud_unchanged():
    c = random_cloud(2, n=5)
    assert apply_transform(c, RigidTransform.from_draw(0.0, 1, 1, 1)) == c


@pytest.mark.parametrize("a,b,c", [(0, 0, 0), (0, 1, 0), (1, 0, 1), (0, 0, 1)])
def test_mirror_entries_follow_formula(a, b, c):
    m = transform_matrix(0.0, a, b, c)
    sa, sb = 2 * a - 1, 2 * b - 1
    expected = [[sa * c, sb * (1 - c), 0], [sa * (1 - c), sb * c, 0], [0, 0, 1]]
    np.testing.assert_array_equal(m, expected)

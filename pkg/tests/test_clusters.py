from collections import deque
from itertools import product

import numpy as np
import pytest

from pvseg.clusters import ClusterStats, cluster_count_vector, connected_components
from pvseg.volume import LabelMap


def _offsets(connectivity):
    offs = []
    for d in product((-1, 0, 1), repeat=3):
        if d == (0, 0, 0):
            continue
        order = sum(abs(x) for x in d)
        if connectivity == 6 and order > 1:
            continue
        if connectivity == 18 and order > 2:
            continue
        offs.append(d)
    return offs


def flood_fill_stats(mask, connectivity):
    """Independent BFS reference for cluster count and sizes."""
    offs = _offsets(connectivity)
    seen = np.zeros_like(mask, dtype=bool)
    sizes = []
    dims = mask.shape
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        queue = deque([start])
        seen[start] = True
        size = 0
        while queue:
            i, j, k = queue.popleft()
            size += 1
            for di, dj, dk in offs:
                n = (i + di, j + dj, k + dk)
                if all(0 <= n[a] < dims[a] for a in range(3)) and mask[n] and not seen[n]:
                    seen[n] = True
                    queue.append(n)
        sizes.append(size)
    return len(sizes), sorted(sizes)


def _labelmap(arr):
    return LabelMap(np.asarray(arr, dtype=np.uint8), (1, 1, 1))


class TestConnectedComponents:
    def test_empty_class(self):
        stats = connected_components(_labelmap(np.zeros((4, 4, 4))), 1)
        assert stats == ClusterStats(1, 26, 0, 0, ())

    def test_single_block(self):
        arr = np.zeros((5, 5, 5), dtype=np.uint8)
        arr[1:3, 1:3, 1:3] = 1
        stats = connected_components(_labelmap(arr), 1, 6)
        assert stats.cluster_count == 1
        assert stats.voxel_count == 8
        assert stats.cluster_sizes == (8,)

    def test_corner_touching_pair_distinguishes_connectivity(self):
        arr = np.zeros((4, 4, 4), dtype=np.uint8)
        arr[1, 1, 1] = 1
        arr[2, 2, 2] = 1  # shares only a corner
        lm = _labelmap(arr)
        assert connected_components(lm, 1, 6).cluster_count == 2
        assert connected_components(lm, 1, 18).cluster_count == 2
        assert connected_components(lm, 1, 26).cluster_count == 1

    def test_edge_touching_pair(self):
        arr = np.zeros((4, 4, 4), dtype=np.uint8)
        arr[1, 1, 1] = 1
        arr[2, 2, 1] = 1  # shares an edge
        lm = _labelmap(arr)
        assert connected_components(lm, 1, 6).cluster_count == 2
        assert connected_components(lm, 1, 18).cluster_count == 1
        assert connected_components(lm, 1, 26).cluster_count == 1

    @pytest.mark.parametrize("connectivity", [6, 18, 26])
    def test_matches_flood_fill(self, connectivity):
        rng = np.random.default_rng(connectivity)
        for density in (0.1, 0.3, 0.5):
            arr = (rng.random((12, 12, 12)) < density).astype(np.uint8)
            stats = connected_components(_labelmap(arr), 1, connectivity)
            n, sizes = flood_fill_stats(arr == 1, connectivity)
            assert stats.cluster_count == n
            assert list(stats.cluster_sizes) == sizes
            assert stats.voxel_count == int((arr == 1).sum())

    def test_class_selection_ignores_other_classes(self):
        arr = np.zeros((4, 4, 4), dtype=np.uint8)
        arr[0, 0, 0] = 1
        arr[0, 0, 1] = 2  # adjacent but a different class
        arr[0, 0, 2] = 1
        stats = connected_components(_labelmap(arr), 1, 26)
        assert stats.cluster_count == 2

    def test_ignore_class_rejected(self):
        with pytest.raises(ValueError):
            connected_components(_labelmap(np.zeros((3, 3, 3))), 255)

    def test_bad_connectivity(self):
        with pytest.raises(ValueError):
            connected_components(_labelmap(np.zeros((3, 3, 3))), 1, 4)

    def test_stats_consistency_guard(self):
        with pytest.raises(ValueError):
            ClusterStats(1, 26, 2, 5, (2, 2))  # sizes sum != voxel_count


class TestCountVector:
    def test_pairs(self):
        a = np.zeros((4, 4, 4), dtype=np.uint8)
        a[0, 0, 0] = 1
        a[2, 2, 2] = 1
        b = np.zeros((4, 4, 4), dtype=np.uint8)
        b[0, 0, 0] = 1
        pred, ref = cluster_count_vector([(_labelmap(a), _labelmap(b))], 1)
        assert pred == [2]
        assert ref == [1]

    def test_grid_mismatch(self):
        a = _labelmap(np.zeros((4, 4, 4)))
        b = _labelmap(np.zeros((5, 4, 4)))
        with pytest.raises(ValueError):
            cluster_count_vector([(a, b)], 1)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            cluster_count_vector([], 1)

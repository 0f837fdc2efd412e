import numpy as np
import pytest

from mtal.align import (AlignmentMap, AlignmentMode, build_alignment_map,
                        build_global_index, common_entities,
                        restrict_alignment)
from mtal.ingest import partition_by_genre, partition_uniform


def domains_from(toy_dataset):
    ds, flags = toy_dataset
    return ds, partition_by_genre(ds, flags)


class TestCommonEntities:
    def test_set_intersection(self, toy_dataset):
        ds, domains = domains_from(toy_dataset)
        got = common_entities(domains[0], domains[1], AlignmentMode.USER_ALIGNED)
        # genre partition shares the full user axis between every pair
        np.testing.assert_array_equal(got, np.arange(ds.m))

    def test_domain_with_itself(self, toy_dataset):
        _, domains = domains_from(toy_dataset)
        got = common_entities(domains[2], domains[2], AlignmentMode.USER_ALIGNED)
        np.testing.assert_array_equal(got, np.sort(domains[2].row_globals))

    def test_symmetry_across_all_pairs(self, toy_dataset):
        ds, flags = toy_dataset
        domains = partition_uniform(ds, 4, seed=0)
        for a in domains:
            for b in domains:
                ab = common_entities(a, b, AlignmentMode.ITEM_ALIGNED)
                ba = common_entities(b, a, AlignmentMode.ITEM_ALIGNED)
                np.testing.assert_array_equal(ab, ba)

    def test_item_aligned_equals_user_aligned_on_transpose(self, toy_dataset):
        ds, flags = toy_dataset
        domains = partition_uniform(ds, 3, seed=1)
        transposed = [type(d)(domain_id=d.domain_id, matrix=d.matrix.transposed(),
                              row_globals=d.col_globals, col_globals=d.row_globals)
                      for d in domains]
        for a, b in [(0, 1), (1, 2), (0, 2)]:
            ia = common_entities(domains[a], domains[b], AlignmentMode.ITEM_ALIGNED)
            ua = common_entities(transposed[a], transposed[b],
                                 AlignmentMode.USER_ALIGNED)
            np.testing.assert_array_equal(ia, ua)


class TestGlobalIndex:
    def test_concatenation_example(self, toy_dataset):
        _, domains = domains_from(toy_dataset)
        gidx = build_global_index(domains[:2], AlignmentMode.USER_ALIGNED)
        n0, n1 = len(domains[0].col_globals), len(domains[1].col_globals)
        assert gidx.width == n0 + n1
        lo, hi = gidx.col_range(1)
        assert (lo, hi) == (n0, n0 + n1)
        np.testing.assert_array_equal(gidx.to_global(1, np.arange(n1)),
                                      np.arange(n0, n0 + n1))

    def test_single_domain_identity(self, toy_dataset):
        ds, flags = toy_dataset
        (dom,) = partition_uniform(ds, 1, seed=0)
        gidx = build_global_index([dom], AlignmentMode.USER_ALIGNED)
        assert gidx.width == ds.n
        np.testing.assert_array_equal(gidx.split_dataset_ids, np.arange(ds.n))

    def test_full_partition_width(self, toy_dataset):
        ds, domains = domains_from(toy_dataset)
        gidx = build_global_index(domains, AlignmentMode.USER_ALIGNED)
        assert gidx.width == ds.n
        assert gidx.aligned_count == ds.m

    def test_bijection_onto_range(self, toy_dataset):
        ds, domains = domains_from(toy_dataset)
        gidx = build_global_index(domains, AlignmentMode.USER_ALIGNED)
        # every original item appears exactly once in the concatenated ids
        assert sorted(gidx.split_dataset_ids.tolist()) == list(range(ds.n))
        assert gidx.domain_of_col(np.array([0])).item() == 0

    def test_overlapping_split_sets_rejected(self, toy_dataset):
        ds, domains = domains_from(toy_dataset)
        # genre domains share users, so item-aligned indexing must fail
        with pytest.raises(ValueError, match="overlap"):
            build_global_index(domains, AlignmentMode.ITEM_ALIGNED)


class TestAlignmentMap:
    def test_pairwise_sets_and_locals(self, toy_dataset):
        ds, domains = domains_from(toy_dataset)
        amap = build_alignment_map(domains, AlignmentMode.USER_ALIGNED)
        amap.validate()
        ids = amap.pair_ids(0, 1)
        np.testing.assert_array_equal(ids, np.arange(ds.m))
        np.testing.assert_array_equal(amap.local_rows(0, ids), np.arange(ds.m))

    def test_restrict_identity_at_full_fraction(self, toy_dataset):
        _, domains = domains_from(toy_dataset)
        amap = build_alignment_map(domains, AlignmentMode.USER_ALIGNED)
        assert restrict_alignment(amap, 1.0, seed=0) is amap

    def test_restrict_half_keeps_floor(self, toy_dataset):
        ds, domains = domains_from(toy_dataset)
        amap = build_alignment_map(domains, AlignmentMode.USER_ALIGNED)
        half = restrict_alignment(amap, 0.5, seed=0)
        for (k, l), ids in half.shared.items():
            assert len(ids) == ds.m // 2
        half.validate()

    def test_restrict_deterministic(self, toy_dataset):
        _, domains = domains_from(toy_dataset)
        amap = build_alignment_map(domains, AlignmentMode.USER_ALIGNED)
        a = restrict_alignment(amap, 0.3, seed=7)
        b = restrict_alignment(amap, 0.3, seed=7)
        for key in a.shared:
            np.testing.assert_array_equal(a.shared[key], b.shared[key])

    def test_restrict_ten_element_example(self):
        ids = np.arange(10)
        amap = AlignmentMap(mode=AlignmentMode.USER_ALIGNED,
                            aligned_ids=[ids, ids],
                            shared={(0, 1): ids, (1, 0): ids})
        half = restrict_alignment(amap, 0.5, seed=1)
        assert len(half.pair_ids(0, 1)) == 5

    def test_bad_fraction_rejected(self, toy_dataset):
        _, domains = domains_from(toy_dataset)
        amap = build_alignment_map(domains, AlignmentMode.USER_ALIGNED)
        with pytest.raises(ValueError):
            restrict_alignment(amap, 0.0, seed=0)

    def test_serialization_roundtrip(self, toy_dataset):
        _, domains = domains_from(toy_dataset)
        amap = build_alignment_map(domains, AlignmentMode.USER_ALIGNED)
        back = AlignmentMap.from_bytes(amap.to_bytes())
        assert back.mode == amap.mode
        for key in amap.shared:
            np.testing.assert_array_equal(back.shared[key], amap.shared[key])
        for a, b in zip(amap.aligned_ids, back.aligned_ids):
            np.testing.assert_array_equal(a, b)


class TestTransposeDuality:
    def test_item_aligned_module_equals_user_aligned_on_transpose(self, toy_dataset):
        ds, flags = toy_dataset
        domains = partition_uniform(ds, 4, seed=2)
        flipped = [type(d)(domain_id=d.domain_id, matrix=d.matrix.transposed(),
                           row_globals=d.col_globals, col_globals=d.row_globals)
                   for d in domains]
        amap_item = build_alignment_map(domains, AlignmentMode.ITEM_ALIGNED)
        amap_user = build_alignment_map(flipped, AlignmentMode.USER_ALIGNED)
        for key in amap_item.shared:
            np.testing.assert_array_equal(amap_item.shared[key],
                                          amap_user.shared[key])
        gidx_item = build_global_index(domains, AlignmentMode.ITEM_ALIGNED)
        gidx_user = build_global_index(flipped, AlignmentMode.USER_ALIGNED)
        np.testing.assert_array_equal(gidx_item.offsets, gidx_user.offsets)
        np.testing.assert_array_equal(gidx_item.split_dataset_ids,
                                      gidx_user.split_dataset_ids)
        assert gidx_item.aligned_count == gidx_user.aligned_count

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cwh.data import InteractionLog, build_popularity
from cwh.errors import SplitError
from cwh.splitter import (SplitBundle, apply_cold_simulation, make_split, read_manifest,
                          stratified_cold_selection, user_holdout, write_manifest)


def _log(per_user, n_items):
    users = [u for u, items in enumerate(per_user) for _ in items]
    items = [i for items in per_user for i in items]
    return InteractionLog.from_pairs(users, items, len(per_user), n_items)


def _pair_set(a):
    return {tuple(p) for p in np.asarray(a).reshape(-1, 2).tolist()}


class TestUserHoldout:
    def test_user_with_eight_items(self):
        split = user_holdout(_log([list(range(8))], 8), min_items=8, rng_seed=0)
        assert len(split.train) == 4
        assert len(split.val_warm) == 2
        assert len(split.test_warm) == 2

    def test_user_below_threshold_stays_in_train(self):
        split = user_holdout(_log([list(range(8)), list(range(7))], 8), min_items=8)
        assert split.train.user_degrees().tolist() == [4, 7]
        assert set(split.test_warm[:, 0]) == {0}

    def test_same_seed_same_holdout(self, small_synth):
        a = user_holdout(small_synth.log, rng_seed=11)
        b = user_holdout(small_synth.log, rng_seed=11)
        assert a == b

    def test_min_items_lower_bound(self):
        with pytest.raises(SplitError):
            user_holdout(_log([list(range(8))], 8), min_items=4)

    def test_no_eligible_user(self):
        with pytest.raises(SplitError, match="at least"):
            user_holdout(_log([list(range(5))], 8), min_items=8)

    def test_sections_are_disjoint_and_cover_the_log(self, small_synth):
        log = small_synth.log
        split = user_holdout(log, rng_seed=2)
        tr, va, te = _pair_set(split.train.pairs()), _pair_set(split.val_warm), _pair_set(split.test_warm)
        assert not (tr & va) and not (tr & te) and not (va & te)
        assert tr | va | te == _pair_set(log.pairs())


class TestStratifiedColdSelection:
    def test_twenty_items_offset_zero(self):
        counts = np.arange(20, 0, -1)           # item k has rank k
        test, val = stratified_cold_selection(build_popularity(counts, "minmax-count"), offset=0)
        assert test.tolist() == [0, 10]
        assert val.tolist() == [1, 11]

    def test_ties_broken_by_item_id(self):
        test, val = stratified_cold_selection(build_popularity([5] * 20, "minmax-count"), 0)
        assert test.tolist() == [0, 10]
        assert val.tolist() == [1, 11]

    def test_offset_nine_wraps_validation_to_residue_zero(self):
        counts = np.arange(20, 0, -1)
        test, val = stratified_cold_selection(build_popularity(counts, "minmax-count"), offset=9)
        assert test.tolist() == [9, 19]
        assert val.tolist() == [0, 10]

    def test_offsets_give_disjoint_test_sets(self, rng):
        pop = build_popularity(rng.integers(0, 500, size=1000), "minmax-count")
        sets = [stratified_cold_selection(pop, o)[0] for o in range(10)]
        assert sum(len(s) for s in sets) == 1000
        assert len(np.unique(np.concatenate(sets))) == 1000

    def test_width_selects_adjacent_residues(self):
        counts = np.arange(40, 0, -1)
        test, val = stratified_cold_selection(build_popularity(counts, "minmax-count"), 0, width=2)
        assert test.tolist() == [0, 1, 10, 11, 20, 21, 30, 31]
        assert val.tolist() == [2, 3, 12, 13, 22, 23, 32, 33]

    def test_bad_offset(self):
        with pytest.raises(SplitError):
            stratified_cold_selection(build_popularity([1, 2], "minmax-count"), offset=10)

    def test_per_decile_counts_uniform(self, rng):
        counts = rng.zipf(1.5, size=1000).clip(max=10_000)
        pop = build_popularity(counts, "minmax-count")
        rank_of = np.empty(1000, dtype=int)
        rank_of[pop.ranking()] = np.arange(1000)
        for offset in range(10):
            test, val = stratified_cold_selection(pop, offset)
            for chosen in (test, val):
                per_decile = np.bincount(rank_of[chosen] // 100, minlength=10)
                assert per_decile.max() - per_decile.min() <= 1


class TestApplyColdSimulation:
    def _base(self):
        # item 0 is consumed by every user; items 1..9 by some
        per_user = [list(range(10)) for _ in range(6)]
        return user_holdout(_log(per_user, 10), min_items=8, rng_seed=4)

    def test_cold_items_leave_train(self):
        split = self._base()
        out = apply_cold_simulation(split, [0], [1])
        counts = out.train.item_counts()
        assert counts[0] == 0 and counts[1] == 0
        assert set(out.test_cold[:, 1]) == {0}
        assert set(out.val_cold[:, 1]) == {1}
        assert np.all(out.cold_mask()[[0, 1]])

    def test_warm_pairs_into_opposite_cold_set_are_dropped(self):
        split = self._base()
        out = apply_cold_simulation(split, [0], [1])
        assert not np.isin(out.test_warm[:, 1], [0, 1]).any()
        assert not np.isin(out.val_warm[:, 1], [0, 1]).any()
        assert not np.isin(out.test_cold[:, 1], [1]).any()
        assert not np.isin(out.val_cold[:, 1], [0]).any()

    def test_warm_test_pairs_on_test_cold_items_are_relabeled(self):
        split = self._base()
        on_item = split.test_warm[split.test_warm[:, 1] == 0]
        on_val_item = split.val_warm[split.val_warm[:, 1] == 1]
        out = apply_cold_simulation(split, [0], [1])
        assert _pair_set(on_item) <= _pair_set(out.test_cold)
        assert _pair_set(on_val_item) <= _pair_set(out.val_cold)
        assert out.relabeled == len(on_item) + len(on_val_item)

    def test_item_with_many_train_pairs_loses_all_of_them(self):
        per_user = [list(range(10)) for _ in range(60)]
        split = user_holdout(_log(per_user, 10), min_items=8)
        assert split.train.item_counts()[3] > 10
        out = apply_cold_simulation(split, [3], [])
        assert out.train.item_counts()[3] == 0

    def test_empty_cold_sets_leave_split_unchanged(self):
        split = self._base()
        assert apply_cold_simulation(split, [], []) == split

    def test_overlapping_cold_sets(self):
        with pytest.raises(SplitError):
            apply_cold_simulation(self._base(), [1, 2], [2])

    def test_user_without_train_items_is_dropped(self, caplog):
        per_user = [[0, 1, 2, 3, 4], list(range(10))]
        split = user_holdout(_log(per_user, 10), min_items=5, rng_seed=0)
        left = split.train.items[split.train.users == 0]
        out = apply_cold_simulation(split, left, [])
        assert out.dropped_users.tolist() == [0]
        for s in ("val_warm", "test_warm", "val_cold", "test_cold"):
            assert 0 not in out.pairs(s)[:, 0]
        assert "dropped" in caplog.text


class TestMakeSplit:
    def test_invariants(self, small_synth):
        split = make_split(small_synth.log, offset=1, seed=0)
        counts = split.train.item_counts()
        cold = split.cold_items()
        assert np.all(counts[cold] == 0)
        assert not np.intersect1d(split.val_cold_items, split.test_cold_items).size
        assert set(split.test_cold[:, 1]) <= set(split.test_cold_items)
        assert set(split.val_cold[:, 1]) <= set(split.val_cold_items)
        sections = [_pair_set(split.train.pairs())] + [_pair_set(split.pairs(s)) for s in
                                                        ("val_warm", "test_warm", "val_cold", "test_cold")]
        total = sum(len(s) for s in sections)
        assert len(set().union(*sections)) == total

    def test_ten_offsets_disjoint_test_cold(self, small_synth):
        sets = [set(make_split(small_synth.log, offset=o, seed=0).test_cold_items) for o in range(10)]
        for a in range(10):
            for b in range(a + 1, 10):
                assert not sets[a] & sets[b]

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 9), st.integers(0, 1000))
    def test_manifest_round_trip(self, tmp_path_factory, small_synth, offset, seed):
        split = make_split(small_synth.log, offset=offset, seed=seed)
        path = tmp_path_factory.mktemp("m") / "fold.csv"
        write_manifest(path, split)
        again = read_manifest(path, small_synth.log.user_labels, small_synth.log.item_labels)
        assert again == split
        path2 = path.with_name("fold2.csv")
        write_manifest(path2, again)
        assert path.read_bytes() == path2.read_bytes()

    def test_manifest_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("a,b\n", encoding="utf-8")
        with pytest.raises(SplitError):
            read_manifest(p)

    def test_manifest_bad_record(self, tmp_path, small_split):
        p = tmp_path / "fold.csv"
        write_manifest(p, small_split)
        p.write_text(p.read_text() + "train,1:x:1\n", encoding="utf-8")
        with pytest.raises(SplitError, match="line"):
            read_manifest(p)

    def test_bundle_equality_checks_type(self, small_split):
        assert small_split != "split"
        assert isinstance(small_split, SplitBundle)

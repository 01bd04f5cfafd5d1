import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bid2x.data import (BidRecord, Campaign, DataError, DatasetHeader, NormStats, Pair, Trajectory, build_raw,
                        denormalize_targets, load_dataset, normalize, prepare, preprocess_today, split_dataset,
                        write_dataset)
from bid2x.synth import default_scenarios, generate_pairs


def _campaign(cid="c0", adv=0, prod=0):
    return Campaign(cid, adv, prod, 100.0, (1.0, 2.0, 0.5), "S")


def _traj(records, cid="c0"):
    return Trajectory(_campaign(cid), 1, [BidRecord(*r) for r in records])


def _header(**kw):
    return DatasetHeader(adv_cat_vocab=kw.get("adv", 4), prod_cat_vocab=kw.get("prod", 4))


def _write_lines(path, header, objs):
    path.write_text("\n".join([json.dumps(header.to_json())] + [json.dumps(o) for o in objs]) + "\n")


def _obj(today, history=((10, 1, 2, 1, 0),), adv=0):
    return {"campaign": _campaign(adv=adv).to_json(), "history": list(history), "today": list(today)}


class TestLoad:
    def test_empty_body_warns(self, tmp_path, caplog):
        path = tmp_path / "d.jsonl"
        _write_lines(path, _header(), [])
        with caplog.at_level(logging.WARNING):
            pairs, header = load_dataset(path)
        assert pairs == [] and "0 samples" in caplog.text

    def test_single_pair_echoes_vocab(self, tmp_path):
        path = tmp_path / "d.jsonl"
        _write_lines(path, _header(adv=7, prod=9), [_obj([(5, 0, 0, 0, 3)])])
        pairs, header = load_dataset(path)
        assert len(pairs) == 1
        assert (header.adv_cat_vocab, header.prod_cat_vocab) == (7, 9)

    def test_non_monotone_tick(self, tmp_path):
        path = tmp_path / "d.jsonl"
        _write_lines(path, _header(), [_obj([(5, 0, 0, 0, 3), (5, 0, 0, 0, 2)])])
        with pytest.raises(DataError, match="non-monotone tick at line 2") as err:
            load_dataset(path)
        assert err.value.lines == [2]

    def test_vocab_overflow_lists_lines(self, tmp_path):
        path = tmp_path / "d.jsonl"
        _write_lines(path, _header(adv=2), [_obj([(5, 0, 0, 0, 1)]), _obj([(5, 0, 0, 0, 1)], adv=2)])
        with pytest.raises(DataError) as err:
            load_dataset(path)
        assert err.value.lines == [3]

    def test_missing_header(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(json.dumps(_obj([(5, 0, 0, 0, 1)])) + "\n")
        with pytest.raises(DataError, match="header"):
            load_dataset(path)

    def test_round_trip(self, tmp_path):
        pairs = generate_pairs(default_scenarios()[:2], 2)
        path = tmp_path / "d.jsonl"
        write_dataset(path, DatasetHeader(6, 10), pairs)
        back, _ = load_dataset(path)
        assert [p.today.records for p in back] == [p.today.records for p in pairs]
        assert [p.campaign.latent for p in back] == [p.campaign.latent for p in pairs]


class TestPreprocess:
    def test_empty_prefix(self):
        tokens, mask = preprocess_today(_traj([]), 5.0, 7, T=4)
        np.testing.assert_array_equal(tokens[0], [5, 7, 0, 0, 0])
        np.testing.assert_array_equal(mask, [1, 0, 0, 0])

    def test_two_record_shift(self):
        tokens, mask = preprocess_today(_traj([(1, 10, 20, 2, 0), (2, 30, 40, 4, 1)]), 3.0, 2, T=5)
        np.testing.assert_array_equal(tokens[:3, :2], [[1, 0], [2, 1], [3, 2]])
        np.testing.assert_array_equal(tokens[:, 2:], [[0, 0, 0], [10, 20, 2], [30, 40, 4], [0, 0, 0], [0, 0, 0]])
        np.testing.assert_array_equal(mask, [1, 1, 1, 0, 0])

    def test_full_prefix(self):
        T = 6
        tokens, mask = preprocess_today(_traj([(1, 0, 0, 0, t) for t in range(T - 1)]), 1.0, T - 1, T)
        assert mask.sum() == T

    def test_overflow(self):
        with pytest.raises(ValueError, match="does not fit"):
            preprocess_today(_traj([(1, 0, 0, 0, t) for t in range(4)]), 1.0, 4, T=4)


class TestNormalize:
    def _stats(self):
        return NormStats({"cost": 0.0}, {"cost": 1.0})

    def test_zero_and_e_minus_one(self):
        s = self._stats()
        assert s.forward("cost", 0.0) == 0.0
        assert s.forward("cost", math.e - 1) == pytest.approx(1.0, abs=1e-12)

    @given(st.lists(st.floats(0, 1e6), min_size=1, max_size=20), st.floats(-2, 2), st.floats(0.1, 5))
    def test_round_trip(self, xs, mu, sigma):
        s = NormStats({"cost": mu}, {"cost": sigma})
        x = np.array(xs)
        np.testing.assert_allclose(s.inverse("cost", s.forward("cost", x)), x, rtol=1e-9, atol=1e-9)

    def test_non_finite(self):
        with pytest.raises(DataError):
            self._stats().forward("cost", [1.0, np.nan])

    def test_zero_cost_maps_to_zero_and_pads_stay_zero(self):
        batch = prepare(generate_pairs(default_scenarios()[:2], 3), 96)
        zero = (batch.targets_raw == 0)
        assert np.all(batch.targets[zero] == 0)
        pad = batch.valid_mask == 0
        assert np.all(batch.today_tokens[pad] == 0)
        assert np.all(batch.today_tokens[:, 0, 2:] == 0)

    def test_denormalize_targets_inverts(self):
        batch = prepare(generate_pairs(default_scenarios()[:2], 3), 96)
        back = denormalize_targets(batch.norm_stats, batch.targets)
        valid = batch.valid_mask > 0
        np.testing.assert_allclose(back[valid], batch.targets_raw[valid], rtol=1e-9, atol=1e-9)


class TestSplit:
    def _pairs(self, n):
        return [Pair(_traj([(1, 0, 0, 0, 0)], f"c{i}"), _traj([(1, 0, 0, 0, 0)], f"c{i}")) for i in range(n)]

    def test_one_each(self):
        parts = split_dataset(self._pairs(3), (1, 1, 1), seed=0)
        assert [len(p) for p in parts] == [1, 1, 1]

    def test_deterministic_and_disjoint(self):
        pairs = self._pairs(20)
        a = split_dataset(pairs, (8, 1, 1), seed=4)
        b = split_dataset(pairs, (8, 1, 1), seed=4)
        ids = [[p.campaign.id for p in part] for part in a]
        assert ids == [[p.campaign.id for p in part] for part in b]
        assert sum(map(len, ids)) == 20 and len(set(sum(ids, []))) == 20

    def test_too_few(self):
        with pytest.raises(ValueError):
            split_dataset(self._pairs(1), (1, 1, 1))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 3))
def test_padding_length_independent(extra):
    """Padding to a larger T leaves the occupied region identical."""
    pairs = generate_pairs(default_scenarios()[:1], 2)
    T = max(max(len(p.today.records), len(p.history.records)) for p in pairs) + 1
    small, big = build_raw(pairs, T), build_raw(pairs, T + extra)
    np.testing.assert_array_equal(big.today_tokens[:, :T], small.today_tokens)
    np.testing.assert_array_equal(big.hist_series[..., :T], small.hist_series)
    assert np.all(big.today_tokens[:, T:] == 0)


def test_normalize_uses_valid_entries_only():
    pairs = generate_pairs(default_scenarios()[:2], 3)
    a = prepare(pairs, 96).norm_stats
    b = normalize(build_raw(pairs, 128), T_max=96).norm_stats
    assert a.shift == pytest.approx(b.shift) and a.scale == pytest.approx(b.scale)

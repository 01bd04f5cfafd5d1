import numpy as np
import pytest
from hypothesis import given, strategies as st

from bid2x.data import build_raw, prepare
from bid2x.evaluation import (argmin_bid, constant_mean_predictions, decile_prefixes, evaluate, export_distribution,
                              monotonic_report, oracle_predictions, predictability_from_errors, probe_monotonicity,
                              probe_predictability, score, select_bid, spend_curve, zero_shot_eval)
from bid2x.model import Bid2X, ModelConfig
from bid2x.synth import default_scenarios, generate_pairs, true_expected_cost

SPECS = default_scenarios()
BY_NAME = {s.name: s for s in SPECS}


@pytest.fixture(scope="module")
def setup():
    pairs = generate_pairs(SPECS[:3], 4)
    batch = prepare(pairs, 96)
    model = Bid2X(ModelConfig(D=8, adv_cat_vocab=6, prod_cat_vocab=10))
    return pairs, batch, model


def test_constant_zero_predictor_mae_is_mean_abs(setup):
    _, batch, _ = setup
    report = score(np.zeros(batch.targets_raw.shape), batch)
    valid = batch.valid_mask > 0
    assert report.mae("cost") == pytest.approx(np.mean(np.abs(batch.targets_raw[..., 0][valid])))


def test_oracle_mae_positive_and_below_constant(setup):
    pairs, batch, _ = setup
    oracle = score(oracle_predictions(pairs, BY_NAME, 96), batch)
    const = score(constant_mean_predictions(batch, batch), batch)
    assert 0 < oracle.mae("cost") < const.mae("cost")
    for m in oracle.per_target.values():
        assert m["MAE"] <= m["RMSE"]


def test_evaluate_deterministic(setup):
    _, batch, model = setup
    assert evaluate(model, batch).to_json() == evaluate(model, batch).to_json()


def test_empty_split_rejected(setup):
    _, batch, _ = setup
    empty = batch.subset(slice(0, 0))
    with pytest.raises(ValueError):
        score(np.zeros(empty.targets_raw.shape), empty)


def test_monotonic_report_buckets():
    curves = np.array([[1, 2, 3, 4], [1, 1, 1, 1], [3, 2, 3, 4], [0, 1, 2, 2]], dtype=float)
    rep = monotonic_report(curves, np.array([0.0, 50.0, 500.0, 20000.0]), [0.5, 1, 1.5, 2])
    assert rep.hits == [2, 0, 0, 1] and rep.misses == [0, 1, 0, 0]
    assert rep.ratio == 0.75
    strict = monotonic_report(curves, np.zeros(4), [0.5, 1, 1.5, 2], strict=True)
    assert strict.ratio == 0.25
    scaled = monotonic_report(curves, np.array([5.0, 5.0, 50.0, 5.0]), [0.5, 1, 1.5, 2], divisor=10)
    assert scaled.edges[1] == 10 and scaled.hits == [3, 0, 0, 0] and scaled.misses == [0, 1, 0, 0]


def test_oracle_monotonic_ratio_is_one(setup):
    pairs, _, _ = setup
    alphas = [0.5, 1.0, 1.5, 2.0]
    raw = build_raw(pairs, 96)
    slots = raw.valid_mask.sum(1).astype(int) - 1
    bids = raw.today_tokens[np.arange(len(pairs)), slots, 0]
    ticks = raw.today_tokens[np.arange(len(pairs)), slots, 1]
    curves = np.stack([[true_expected_cost(BY_NAME[p.campaign.scenario], a * b, t)
                        for a in alphas] for p, b, t in zip(pairs, bids, ticks)])
    assert monotonic_report(curves, raw.targets[np.arange(len(pairs)), slots, 0], alphas).ratio == 1.0


def test_probe_monotonicity_runs(setup):
    pairs, batch, model = setup
    rep = probe_monotonicity(model, pairs, batch.norm_stats)
    assert sum(rep.hits) + sum(rep.misses) == len(pairs)
    assert 0.0 <= rep.ratio <= 1.0
    with pytest.raises(ValueError):
        probe_monotonicity(model, pairs, batch.norm_stats, alphas=[2.0, 1.0])


def test_decile_prefixes():
    assert decile_prefixes(20) == [2, 4, 6, 8, 10, 12, 14, 16, 18]
    assert len(decile_prefixes(13)) == 9 and max(decile_prefixes(10)) == 9


def test_predictability_curve(setup):
    pairs, batch, model = setup
    curve = probe_predictability(model, pairs, batch.norm_stats)
    assert all(len(v) == 9 for v in curve.mae.values())
    falling = np.broadcast_to(np.linspace(9, 1, 9)[None, :, None], (4, 9, 3))
    assert predictability_from_errors(falling).spearman["cost"] == pytest.approx(-1.0)


def test_zero_shot_refuses_seen_scenario(setup):
    pairs, batch, model = setup
    with pytest.raises(ValueError, match="training manifest"):
        zero_shot_eval(model, ["BCB"], pairs, batch.norm_stats, "BCB")
    report = zero_shot_eval(model, ["TR"], pairs, batch.norm_stats, "BCB")
    assert report.scenario == "BCB" and report.n_samples == 4


def test_export_distribution(setup, tmp_path):
    _, batch, model = setup
    exp = export_distribution(model, batch, "cost", bins=10, seed=1)
    valid = batch.valid_mask > 0
    assert exp.true_zero_mass == pytest.approx(np.mean(batch.targets_raw[..., 0][valid] == 0))
    assert sum(exp.predicted) == sum(exp.truth) == int(valid.sum())
    assert 0 < exp.pred_zero_mass < 1
    lines = exp.write(tmp_path / "h.txt").read_text().splitlines()
    assert len(lines) == 2 + 10 and len(lines[1].split()) == 3
    no_zip = Bid2X(ModelConfig(D=8, adv_cat_vocab=6, prod_cat_vocab=10, no_zip=True))
    assert export_distribution(no_zip, batch).pred_zero_mass == 0.0


def test_oracle_zero_bin_is_empty(setup):
    pairs, batch, _ = setup
    means = oracle_predictions(pairs, BY_NAME, 96)[..., 0][batch.valid_mask > 0]
    assert np.mean(means == 0) == 0.0


def test_argmin_bid_examples():
    assert argmin_bid([1, 2, 3], [5, 9, 14], 9) == 2
    assert argmin_bid([1, 2, 3], [5, 9, 14], 0) == 1
    assert argmin_bid([1, 2, 3], [8, 10, 14], 9) == 1


@given(st.lists(st.floats(0, 100), min_size=1, max_size=12), st.floats(0, 100))
def test_argmin_matches_brute_force_and_monotone_transform(preds, budget):
    grid = list(range(1, len(preds) + 1))
    chosen = argmin_bid(grid, preds, budget)
    dists = [abs(p - budget) for p in preds]
    assert chosen == min(g for g, d in zip(grid, dists) if d == min(dists))
    # a strictly monotone transform of the distances cannot move the argmin
    transformed = [4.0 * d + 0.0 for d in dists]  # exact in floating point
    assert chosen == min(g for g, d in zip(grid, transformed) if d == min(transformed))


def test_select_bid_modes(setup):
    pairs, batch, model = setup
    pair = pairs[0]
    grid = [5.0, 10.0, 20.0]
    spend = spend_curve(model, batch.norm_stats, pair, grid)
    assert spend.shape == (3,)
    assert select_bid(model, batch.norm_stats, pair, float(spend[1]), grid) == 10.0
    short = type(pair)(pair.history, type(pair.today)(pair.campaign, 1, pair.today.records[:2]))
    rolled = spend_curve(model, batch.norm_stats, short, [5.0], next_tick=94, mode="rollout")
    assert rolled.shape == (1,) and rolled[0] >= 0
    with pytest.raises(ValueError):
        select_bid(model, batch.norm_stats, pair, 1.0, [3.0, 1.0])

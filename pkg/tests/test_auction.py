import io
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from camoe.auction import (AuctionError, Campaign, ServingRequest, SimulationError, compute_bid,
                           constant_scorer, gsp_prices, oracle_scorer, rank_bids, run_auction, serve,
                           simulate)
from camoe.datagen import AdSlot, GeneratorConfig


def direct_bid(o, p, c, b):
    """Final bid straight from the rational formula."""
    v = Fraction(o) / (1 + Fraction(p)) * (Fraction(c) / Fraction(b))
    return min(math.ceil(v), o)


# -- bids ----------------------------------------------------------------------------


def test_bid_examples():
    assert compute_bid(100, 0.0, 0.03, 0.03) == 100
    assert compute_bid(100, 1.0, 0.01, 0.02) == 25
    assert compute_bid(100, 0.0, 0.04, 0.01) == 100
    assert compute_bid(100, 0.0, 0.0, 0.01) == 0


def test_bid_errors():
    with pytest.raises(AuctionError):
        compute_bid(100, 0.0, 0.1, 0.0)
    with pytest.raises(AuctionError):
        compute_bid(0, 0.0, 0.1, 0.1)
    with pytest.raises(AuctionError):
        compute_bid(100, -0.5, 0.1, 0.1)
    with pytest.raises(AuctionError):
        compute_bid(100, 0.0, 1.5, 0.1)


def test_bid_matches_direct_formula_on_random_inputs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        o = int(rng.integers(1, 10_000))
        p = float(rng.choice([0.0, 0.25, 0.5, 1.0, rng.random() * 3]))
        c = float(rng.random())
        b = float(rng.random() * 0.2 + 1e-4)
        assert compute_bid(o, p, c, b) == direct_bid(o, p, c, b), (o, p, c, b)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 1000), st.sampled_from([0.0, 0.5, 1.0, 3.0]),
       st.integers(0, 100), st.integers(1, 100))
def test_bid_near_integers_is_exact(o, p, c_pct, b_pct):
    # hundredths make v land on or near integers often
    c, b = c_pct / 100, b_pct / 100
    assert compute_bid(o, p, c, b) == direct_bid(o, p, c, b)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5000), st.floats(0, 4), st.floats(0, 1), st.floats(0, 1),
       st.floats(1e-4, 1))
def test_bid_monotone(o, p, c1, c2, b):
    lo, hi = sorted((c1, c2))
    assert compute_bid(o, p, lo, b) <= compute_bid(o, p, hi, b)
    assert compute_bid(o, p + 0.5, hi, b) <= compute_bid(o, p, hi, b)
    assert 0 <= compute_bid(o, p, hi, b) <= o


# -- GSP ------------------------------------------------------------------------------


def test_auction_examples():
    out = run_auction([("A", 100), ("B", 60), ("C", 30)])
    assert (out.winner, out.price, out.winning_bid) == ("A", 60, 100)
    out = run_auction([("A", 100)], reserve=1)
    assert (out.winner, out.price) == ("A", 1)
    out = run_auction([("B", 50), ("A", 50)])
    assert (out.winner, out.price) == ("A", 50)
    with pytest.raises(AuctionError):
        run_auction([])


def test_reserve_floors_the_price():
    assert run_auction([("A", 0)]).price == 0
    assert run_auction([("A", 10), ("B", 0)]).price == 1


def test_gsp_positions():
    ranked = rank_bids([("A", 100), ("B", 60), ("C", 30)])
    assert gsp_prices(ranked, 2) == [("A", 100, 60), ("B", 60, 30)]
    assert gsp_prices(ranked, 5)[-1] == ("C", 30, 1)


bid_lists = st.lists(st.tuples(st.sampled_from("ABCDEFGH"), st.integers(0, 500)),
                     min_size=1, max_size=8, unique_by=lambda t: t[0])


@settings(max_examples=300, deadline=None)
@given(bid_lists)
def test_price_never_exceeds_bid(bids):
    out = run_auction(bids)
    assert out.price <= out.winning_bid
    assert out.winning_bid == max(b for _, b in bids)


@settings(max_examples=300, deadline=None)
@given(bid_lists, st.data())
def test_removing_a_loser_never_raises_price(bids, data):
    out = run_auction(bids)
    losers = [cb for cb in bids if cb[0] != out.winner]
    if not losers:
        return
    drop = data.draw(st.sampled_from(losers))
    rest = [cb for cb in bids if cb != drop]
    after = run_auction(rest)
    assert after.winner == out.winner
    assert after.price <= out.price


# -- serving ------------------------------------------------------------------------------


def _request(focus, content="music"):
    return ServingRequest(0, np.zeros((1, 2)), focus, content, ("a", "v"))


def test_serve_routes_by_focus():
    audio, video = run_auction([("a", 10)]), run_auction([("v", 20)])
    assert serve(_request("in"), audio, video).winner == "v"
    assert serve(_request("in"), audio, video).slot is AdSlot.StreamVideo
    audio, video = run_auction([("a", 10)]), run_auction([("v", 20)])
    assert serve(_request("out"), audio, video).winner == "a"
    assert serve(_request("out", "podcast"), audio, None).slot is AdSlot.Podcast


def test_serve_no_fill():
    assert serve(_request("in"), run_auction([("a", 10)]), None) is None
    assert serve(_request("out"), None, run_auction([("v", 10)])) is None


def test_campaign_validation():
    with pytest.raises(AuctionError):
        Campaign("x", "banner", 10)
    with pytest.raises(AuctionError):
        Campaign("x", "audio", 10, trailing_ctr=0.0)


# -- simulation ------------------------------------------------------------------------------

TRAFFIC = GeneratorConfig(n=0, seed=0)


def test_zero_steps_gives_empty_report():
    report = simulate({"oracle": oracle_scorer}, TRAFFIC, steps=0, seed=0)
    for m in ("audio", "video"):
        st_ = report.stats("oracle", m)
        assert (st_.impressions, st_.clicks, st_.spend, st_.no_fill) == (0, 0, 0, 0)
        assert st_.ctr is None and st_.ecpc is None


def test_identical_arms_give_identical_stats():
    report = simulate({"a": oracle_scorer, "b": oracle_scorer}, TRAFFIC, steps=2000, seed=3)
    assert report.to_dict()["arms"]["a"] == report.to_dict()["arms"]["b"]
    again = simulate({"a": oracle_scorer, "b": oracle_scorer}, TRAFFIC, steps=2000, seed=3)
    assert again.to_json() == report.to_json()


def test_arm_order_does_not_matter():
    one = simulate({"o": oracle_scorer, "c": constant_scorer(0.02)}, TRAFFIC, steps=1500, seed=4)
    two = simulate({"c": constant_scorer(0.02), "o": oracle_scorer}, TRAFFIC, steps=1500, seed=4)
    for arm in ("o", "c"):
        assert one.to_dict()["arms"][arm] == two.to_dict()["arms"][arm]


def test_non_finite_scorer_names_arm_and_step():
    def broken(features, slots, true_ctr):
        out = np.full(len(slots), 0.01)
        out[3 * 8 + 1] = np.nan
        return out

    with pytest.raises(SimulationError, match=r"'broken'.*step 3"):
        simulate({"broken": broken}, TRAFFIC, steps=10, seed=0)


def test_event_log_has_one_line_per_pod():
    log = io.StringIO()
    report = simulate({"o": oracle_scorer}, TRAFFIC, steps=300, seed=5, event_log=log)
    events = [json.loads(line) for line in log.getvalue().splitlines()]
    assert len(events) == 300
    served = [e for e in events if e["winner"] is not None]
    total = sum(report.stats("o", m).impressions for m in ("audio", "video"))
    assert len(served) == total
    for e in events:
        assert set(e) == {"step", "arm", "focus", "slot", "winner", "bid", "price", "click"}
        if e["winner"] is not None:
            assert e["price"] <= e["bid"]
            assert e["winner"].startswith("video" if e["focus"] == "in" else "audio")


def test_simulation_rejects_bad_arguments():
    with pytest.raises(SimulationError):
        simulate({}, TRAFFIC, steps=10, seed=0)
    with pytest.raises(SimulationError):
        simulate({"o": oracle_scorer}, TRAFFIC, steps=10, seed=0, pod_size=0)
    with pytest.raises(SimulationError):
        simulate({"o": oracle_scorer}, TRAFFIC, steps=10, seed=0, half_life=0)


def test_oracle_beats_constant_on_ctr():
    mean_ctr = float(np.mean(list(TRAFFIC.base_ctr.values())))
    report = simulate({"oracle": oracle_scorer, "constant": constant_scorer(mean_ctr)},
                      TRAFFIC, steps=100_000, seed=1)

    def ctr(arm):
        clicks = sum(report.stats(arm, m).clicks for m in ("audio", "video"))
        return clicks / sum(report.stats(arm, m).impressions for m in ("audio", "video"))

    assert ctr("oracle") > ctr("constant")

import numpy as np
import pytest

from core import BetsError, Forecast, UnquotableError
from forecaster import ExactForecaster
from market import (STAKE_SCALE, FlightRound, MarketSimulation, PassengerPool, PassengerProfile, PassengerType,
                    clear_flight, clearing_price, insured_payout, quote, willingness_to_pay)
from streams import IIDLogisticStream, RouteStream


def make_pool(types, r_alt, r_trip, c_delay):
    return PassengerPool(np.array(types), np.array(r_alt, dtype=float), np.array(r_trip, dtype=float),
                         np.array(c_delay, dtype=float))


def test_quote_examples():
    assert quote(0.5, 0.0, 20.0) == pytest.approx(20.0)
    assert quote(0.0, 0.0, 50.0) == 0.0
    # 시장 모드의 음수 c
    assert quote(0.2, -0.05, 100.0) == pytest.approx(17.647, abs=1e-3)
    with pytest.raises(UnquotableError):
        quote(0.6, 0.4, 10.0)
    with pytest.raises(BetsError):
        quote(0.5, 0.0, -1.0)


def test_insured_payout_makes_utility_flat():
    mu, c, c_delay = 0.3, 0.05, 400.0
    b1 = insured_payout(mu, c, c_delay)
    b0 = quote(mu, c, b1)
    delayed = -c_delay + b1
    on_time = -b0
    assert delayed == pytest.approx(on_time)
    assert on_time == pytest.approx(-(mu + c) * c_delay)


def test_willingness_to_pay_examples():
    naive = PassengerProfile(PassengerType.NAIVE, 100.0, 300.0, 1000.0)
    trustful = PassengerProfile(PassengerType.TRUSTFUL, 100.0, 300.0, 250.0)
    cautious = PassengerProfile(PassengerType.CAUTIOUS, 100.0, 300.0, 500.0)
    assert willingness_to_pay(naive, 0.5, 0.1) == 200.0
    assert willingness_to_pay(trustful, 0.5, 0.1) == pytest.approx(75.0)
    assert willingness_to_pay(cautious, 0.5, 0.1, mechanism_on=False) == pytest.approx(-300.0)
    assert willingness_to_pay(cautious, 0.2, 0.1, mechanism_on=True) == pytest.approx(50.0)
    # mu + c >= 1 이면 보험 불가: 최악 가정
    assert willingness_to_pay(cautious, 0.8, 0.3, mechanism_on=True) == pytest.approx(-300.0)


def test_vector_wtp_matches_profiles(rng):
    pool = PassengerPool.sample(rng, 0.4, size=200)
    for mechanism_on in (True, False):
        wtp = pool.wtp(0.35, 0.05, mechanism_on)
        for i in range(len(pool)):
            assert wtp[i] == pytest.approx(willingness_to_pay(pool.profile(i), 0.35, 0.05, mechanism_on))


def test_pool_type_counts(rng):
    pool = PassengerPool.sample(rng, 0.25, size=1000)
    assert np.bincount(pool.types, minlength=3).tolist() == [375, 375, 250]
    assert pool.c_delay.min() >= 0.2 * np.exp(4.0) and pool.c_delay.max() <= 0.2 * np.exp(9.0)
    with pytest.raises(BetsError):
        PassengerPool.sample(rng, 1.5)


def test_clearing_price_rules():
    wtp = np.array([5.0, -1.0, 3.0, 0.0])
    price, flyers = clearing_price(wtp, 5)
    assert price == 3.0 and flyers.tolist() == [0, 2]
    price, flyers = clearing_price(wtp, 1)
    assert price == 5.0 and flyers.tolist() == [0]
    price, flyers = clearing_price(np.array([4.0, 4.0, 4.0]), 2)
    assert price == 4.0 and flyers.tolist() == [0, 1]
    price, flyers = clearing_price(np.array([-2.0, 0.0]), 1)
    assert price == 0.0 and flyers.size == 0


def test_insured_utility_is_outcome_independent():
    pool = make_pool([2, 2, 2], [10.0, 20.0, 30.0], [300.0, 350.0, 390.0], [100.0, 200.0, 50.0])
    f = Forecast(0.3, 0.05, mode="exactness")
    outcomes = [clear_flight(FlightRound(np.zeros(1), f, 0.3, y, pool, capacity=3), True) for y in (0, 1)]
    assert outcomes[0].price == outcomes[1].price
    assert outcomes[0].metrics.passenger_utility == pytest.approx(outcomes[1].metrics.passenger_utility, abs=1e-9)
    assert outcomes[0].total_stake == pytest.approx(350.0)


def test_all_naive_pool_ignores_mechanism(rng):
    pool = PassengerPool.sample(rng, 0.0, size=100)
    pool.types[:] = 0
    f = Forecast(0.4, 0.1, mode="exactness")
    on = clear_flight(FlightRound(np.zeros(1), f, 0.7, 1, pool, capacity=30), True)
    off = clear_flight(FlightRound(np.zeros(1), f, 0.7, 1, pool, capacity=30), False)
    assert on.price == off.price
    assert on.metrics.revenue == off.metrics.revenue
    assert on.total_stake == 0.0


def test_cautious_pool_without_mechanism_sells_nothing():
    n = 50
    pool = make_pool([2] * n, [50.0] * n, [300.0] * n, [5000.0] * n)
    out = clear_flight(FlightRound(np.zeros(1), Forecast(0.3, mode="exactness"), 0.3, 0, pool, capacity=10), False)
    assert out.metrics.tickets == 0 and out.metrics.revenue == 0.0
    assert out.metrics.passenger_utility == pytest.approx(50.0 * n)


def test_flight_accounting(rng):
    pool = PassengerPool.sample(rng, 0.5, size=300)
    f = Forecast(0.25, -0.02, mode="exactness")
    out = clear_flight(FlightRound(np.zeros(1), f, 0.25, 1, pool, capacity=90), True)
    m = out.metrics
    assert m.total_utility == pytest.approx(m.revenue + m.passenger_utility, abs=1e-9)
    flown = np.zeros(len(pool), dtype=bool)
    flown[out.flyers] = True
    expected = (pool.r_alt[~flown].sum() + (pool.r_trip[flown] - out.price - pool.c_delay[flown]).sum()
                + out.bet_payouts.sum())
    assert m.passenger_utility == pytest.approx(expected)
    assert m.insurance_net == pytest.approx(out.bet_payouts.sum())


def test_price_rises_with_mechanism_when_demand_exceeds_capacity():
    checked = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        pool = PassengerPool.sample(rng, 0.25)
        f = Forecast(0.3, 0.05, mode="exactness")
        if (pool.wtp(f.mu, f.c, False) > 0).sum() < 300:
            continue
        on = clear_flight(FlightRound(np.zeros(1), f, 0.3, 0, pool), True)
        off = clear_flight(FlightRound(np.zeros(1), f, 0.3, 0, pool), False)
        assert on.price >= off.price
        assert on.metrics.revenue >= off.metrics.revenue
        checked += 1
    assert checked > 0


def _simulation(mechanism_on, seed=3, flights=30):
    stream = IIDLogisticStream(3, seed=seed)
    fc = ExactForecaster.from_horizon(3, flights, selector="swap", seed=seed)
    sim = MarketSimulation(stream, fc, 0.5, mechanism_on, seed=seed, capacity=15, pool_size=50)
    return sim, sim.run(flights)


def test_insurance_net_matches_forecaster_payout():
    sim, frame = _simulation(True)
    assert len(frame) == 30
    assert sim.cumulative.insurance_net == pytest.approx(sim.forecaster.cum_payout * STAKE_SCALE, rel=1e-9,
                                                         abs=1e-6)
    off, _ = _simulation(False)
    assert off.cumulative.insurance_net == 0.0
    assert off.forecaster.cum_payout == 0.0


def test_simulation_is_deterministic():
    _, first = _simulation(True, seed=8, flights=20)
    _, second = _simulation(True, seed=8, flights=20)
    assert first.equals(second)
    assert {"flight_idx", "mechanism", "cautious_frac", "price", "tickets", "revenue_avg", "total_utility_avg",
            "insurance_net_avg", "c_t", "lambda_t"} <= set(first.columns)
    assert (first["mechanism"] == "on").all()


def test_unquotable_flights_are_counted_and_logged(caplog):
    stream = IIDLogisticStream(3, seed=2)
    # 학습하지 않는 기반 예측기, c_hat = 1 로 고정: mu + c >= 1
    fc = ExactForecaster.from_horizon(3, 10, selector="none", eta=0.0, arch="linear", init="zeros", seed=2)
    fc.base.phi.params["b"][:] = 2.0
    sim = MarketSimulation(stream, fc, 0.5, True, seed=2, capacity=15, pool_size=50)
    frame = sim.run(10)
    assert sim.unquotable == 10 and sim.unquotable_share == 1.0
    assert (frame["c_t"] == 1.0).all()
    assert sim.cumulative.insurance_net == 0.0 and sim.stake_total == 0.0
    assert "unquotable" in caplog.text


def _route_market(seed, frac, mechanism_on, selector="swap", flights=500):
    stream = RouteStream(T=flights, seed=seed)
    fc = ExactForecaster.from_horizon(stream.d, flights, selector=selector, seed=seed + 1)
    sim = MarketSimulation(stream, fc, frac, mechanism_on, seed=seed + 2)
    return sim, sim.run(flights)


@pytest.mark.parametrize("frac", [0.25, 0.5, 0.75])
def test_mechanism_raises_revenue_and_utility(frac):
    wins = 0
    for seed in range(5):
        _, on = _route_market(seed, frac, True)
        _, off = _route_market(seed, frac, False)
        wins += (on["revenue_avg"].iloc[-1] >= off["revenue_avg"].iloc[-1]
                 and on["total_utility_avg"].iloc[-1] >= off["total_utility_avg"].iloc[-1])
    assert wins >= 4


def test_market_swap_and_none_selectors():
    close = 0
    for seed in range(3):
        swap, swap_frame = _route_market(seed, 0.5, True, selector="swap")
        none, none_frame = _route_market(seed, 0.5, True, selector="none")
        assert (none_frame["lambda_t"] == 0.0).all()
        assert ((swap_frame["lambda_t"] >= -1.0) & (swap_frame["lambda_t"] < 1.0)).all()
        assert (swap_frame["selector"] == "swap").all() and (none_frame["selector"] == "none").all()
        # 지불액 누적은 스테이크 합 대비 작아야 함
        assert swap.stake_total > 0.0
        close += abs(swap.forecaster.cum_payout) <= 0.1 * swap.stake_total
    assert close >= 2

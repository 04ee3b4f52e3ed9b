"""Smoke test for the pmm extension module.

Build and install first:  maturin develop --release -m crates/python/Cargo.toml
"""

import math
import statistics

import pmm


def main():
    sched = pmm.NoiseSchedule.linear(1000, 1e-4, 0.02)
    assert len(sched) == 1000
    assert sched.alpha_bar(0) == 1.0 and sched.alpha_bar(1000) < 5e-5

    v2 = pmm.SchedulerCoefficients(sched, "v2")
    a, b, sigma = v2.triple(1000)
    assert a > 0 and sigma > 0

    assert pmm.expected_score_calls(1000, 2, "option1") == 750
    assert pmm.expected_score_calls(1000, 50, "option2") == 40

    xs, calls = pmm.reverse_sample(sched, "v2", [(1.0, [0.0], 1.0)], chains=2000, seed=1, k=10)
    terminal = [x[0] for x in xs]
    assert abs(statistics.fmean(terminal)) < 0.1
    assert abs(statistics.pvariance(terminal) - 0.99107) < 0.1
    assert set(calls) == {200}

    chain = pmm.plmc_chain([0.0], alpha=0.1, k=10, option="option2", steps=20000, seed=3)
    second = statistics.fmean(x[0] ** 2 for x in chain[1000:])
    assert abs(second - 1.0) < 0.1, second

    # a python gradient: F(x) = x^4 / 4
    quartic = pmm.plmc_chain([0.5], 0.05, 4, "option1", 2000, 4, grad=lambda x: [x[0] ** 3])
    assert all(math.isfinite(x[0]) for x in quartic)

    ulmc = pmm.plmc_chain([0.0, 0.0], 0.1, 10, "option2", 100, 5, gamma=2.0)
    assert len(ulmc[-1]) == 2

    assert abs(pmm.w2_gaussians([0.0], [[1.0]], [1.0], [[4.0]]) - math.sqrt(2.0)) < 1e-12
    assert pmm.kl_gaussians([0.0], [[1.0]], [0.0], [[1.0]]) == 0.0
    assert pmm.empirical_w2_1d([0.0, 1.0], [0.0, 1.0]) == 0.0
    stat, p, reject = pmm.energy_test(terminal[:500], terminal[500:1000], permutations=199)
    assert 0.0 <= p <= 1.0 and stat >= 0.0

    names = pmm.list_scenarios()
    assert len(names) == 11
    passed, csv = pmm.run_scenario(pmm.default_config("scaling_check"))
    assert passed and csv.startswith("case,metric,value")

    try:
        pmm.SchedulerCoefficients(sched, "v9")
    except ValueError:
        pass
    else:
        raise AssertionError("bad variant accepted")

    print("pmm smoke test ok")


if __name__ == "__main__":
    main()

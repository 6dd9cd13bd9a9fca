"""Smoke test for the volterra_lab extension.

Build and install it first:

    pip install maturin
    maturin develop --release -m crates/python/Cargo.toml

then run `python python/smoke_test.py`.
"""

import math

import volterra_lab as vl


def check(label, ok):
    print(f"{'ok  ' if ok else 'FAIL'} {label}")
    if not ok:
        raise SystemExit(1)


names = [name for name, _, _ in vl.scenarios()]
check("registry lists the gallery", {"ex2.6", "ex3.3", "ex3.8"} <= set(names))

v = vl.run_scenario("ex3.3")
y0 = v.metrics["initial_value"]
check(f"ex3.3 Y(0)={y0:.5f} near 3e^-2 - 1", abs(y0 - (3 * math.exp(-2) - 1)) < 5e-3)
check("ex3.3 matches its expectation", v.matches_expectation())
check("ex3.3 flags the free term", "free_term_monotone" in v.violated)

quick = vl.run_scenario("thm2.5-random", trials=10, depth=6)
check("small comparison family holds", quick.conclusion_held and quick.depth == 6)
report = vl.render_report([v, quick], "json")
check("json report mentions both runs", "ex3.3" in report and "thm2.5-random" in report)

try:
    vl.run_scenario("no-such-scenario")
    check("unknown scenario raises", False)
except KeyError:
    check("unknown scenario raises KeyError", True)

check("nonneg matrix", vl.is_nonneg([[1.0, 0.0], [2.0, 3.0]]))
check("metzler matrix", vl.is_metzler([[-1.0, 0.5], [0.0, -2.0]]))
check("non-metzler matrix", not vl.is_metzler([[0.0, -0.1], [1.0, 0.0]]))
check("orthant preserved", vl.preserves_orthant([[1.0, 2.0], [0.0, 1.0]]))
check("orthant not preserved", not vl.preserves_orthant([[1.0, -2.0], [0.0, 1.0]]))

lat = vl.Lattice(1.0, 1024, deterministic=True)
check(f"{lat!r} has step 1/1024", abs(lat.step - 1.0 / 1024) < 1e-15)

# X(t) = 1 + int_0^t X ds has solution e^t.
x = vl.solve_forward_volterra(lat, lambda t: 1.0, lambda t, s: 1.0)
check(f"forward X(1)={x[-1][0]:.5f} near e", abs(x[-1][0] - math.e) < 5e-3)

# Y(t) = 1 + int_t^1 Y ds has solution e^(1-t).
y = vl.solve_backward_volterra(lat, lambda t: 1.0, lambda t, s: 1.0, 1.0)
check(f"backward Y(0)={y[0][0]:.5f} near e", abs(y[0][0] - math.e) < 5e-3)

try:
    vl.solve_forward_volterra(lat, lambda t: 1.0, lambda t, s: 1.0 / 0.0)
    check("callback error propagates", False)
except ZeroDivisionError:
    check("callback error propagates", True)

print("smoke test passed")

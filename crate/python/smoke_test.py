"""Smoke test of the accel extension module.

Build and install first, e.g. `maturin build --release -m crates/py/Cargo.toml`
followed by `pip install target/wheels/accel-*.whl`.
"""

import json
import math

import accel


def main():
    pot = accel.Potential()
    assert pot.d == 8 and pot.omega == [4.0]
    q = [0.1] + [0.0] * 7
    assert pot.eval(q, [0.0]) > 0.0
    assert len(pot.grad_q(q, [0.3])) == 8

    static = accel.Potential(d=3, omega=[0.0])
    c = accel.collide(static, [6.0, 0.0, 0.0], [0.0, 0.2, 0.0], [0.5], 0.7)
    assert not c["trapped"]
    assert abs(c["delta_e"]) < 1e-6, c

    tr = accel.particle_trajectory([40.0] + [0.0] * 7, 50, seed=1)
    assert len(tr["speeds"]) == 51

    chain = accel.XiChain(1.0)
    a = chain.run(30.0, 1000, seed=4)
    b = chain.run(30.0, 1000, seed=4)
    assert a == b and len(a) == 1001

    exact = accel.bessel_exit_prob(1.0, 0.5, 2.0)
    assert abs(exact - accel.p_plus(1.0)) < 1e-15
    est = chain.exit_prob(100.0, n_paths=2000, seed=2)
    assert abs(est["p_hat"] - exact) < 5 * est["se"] + 0.01, (est, exact)
    assert math.isclose(accel.mu(1.0), 2 * exact - 1)

    aux = accel.aux_traces(1.0, 256.0, 50, max_transitions=3, seed=3)
    assert len(aux["traces"]) == 50
    assert all(t["stop_times"][0] == 0 for t in aux["traces"])

    d2 = accel.d_squared(20000, seed=5)
    assert d2["value"] > 0.0

    cfg = {"experiment": "xi_chain", "params": {"gamma": 1.0, "xi0": 20, "steps": 200, "n_paths": 3, "stride": 50}}
    res = accel.run_experiment(json.dumps(cfg))
    assert res["manifest"]["experiment"] == "xi_chain"
    assert "paths.csv" in res["data"]

    try:
        accel.XiChain(1.0, noise="gaussian")
    except ValueError:
        pass
    else:
        raise AssertionError("bad noise law accepted")

    print("smoke test ok:", pot, chain, f"p_plus={exact:.4f}", f"D^2={d2['value']:.3e}")


if __name__ == "__main__":
    main()

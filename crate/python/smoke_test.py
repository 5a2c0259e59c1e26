"""Smoke test for the reluid extension module.

Build and run from the workspace root:

    cargo build -p reluid-py --release
    cp target/release/libreluid_py.so python/reluid.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import reluid  # noqa: E402


def close(a, b, tol=1e-10):
    return abs(a - b) <= tol * (1 + abs(a) + abs(b))


def main():
    chain = reluid.Network([1, 1, 1], [1.0, 1.0, 0.0, 0.0])
    assert chain.layer_sizes == [1, 1, 1]
    assert chain.dimension == 3

    one = reluid.evaluate(chain, [[2.0]])
    assert one["verdict"] == "NotLocallyIdentifiable", one["verdict"]
    assert (one["r_gamma"], one["r_a"]) == (1, 1)

    three = reluid.evaluate(chain, [[2.0], [-1.0], [5.0]])
    assert three["verdict"] == "LocallyIdentifiable"
    assert three["r_gamma"] == three["dim"] == 3

    g = reluid.gamma(chain, [[2.0], [-1.0], [5.0]])
    assert g == [[2.0, 1.0, 1.0], [0.0, 0.0, 1.0], [5.0, 1.0, 1.0]], g

    net = reluid.Network.random([2, 3, 2], 7)
    x = [[0.3, -1.2], [1.5, 0.4], [-0.7, 0.9], [0.1, 0.1]]
    res = reluid.lift_residual(net, x)
    assert res["passed"], res

    # Output of alpha @ phi reproduces the forward pass.
    alpha = reluid.activation_matrix(net, x)
    phi = reluid.lift(net)
    f = net.forward(x)
    for i, row in enumerate(alpha):
        for v in range(2):
            s = sum(a * phi[p][v] for p, a in enumerate(row))
            assert close(s, f[i][v], 1e-9)

    twin_of = net.rescaled(3, 5.0)
    assert reluid.are_equivalent(net, twin_of) == "positive_rescaling"
    assert all(close(a, b, 1e-9) for ra, rb in zip(f, twin_of.forward(x)) for a, b in zip(ra, rb))

    canon = net.canonical()
    assert reluid.are_equivalent(net, canon) == "positive_rescaling"

    twin = reluid.find_twin(chain, [[2.0]], seed=1)
    assert twin is not None
    assert close(twin.forward([[2.0]])[0][0], 2.0)
    assert reluid.are_equivalent(chain, twin) == "not_equivalent"

    try:
        reluid.find_twin(chain, [[2.0], [-1.0], [5.0]])
    except ValueError as e:
        assert "necessary condition" in str(e)
    else:
        raise AssertionError("twin search should be refused when the necessary condition holds")

    exact = reluid.exact_verify(reluid.Network([2, 2, 1], [1, -2, 3, 1, 2, -1, 1, 0, 2]), [[1, 2], [-3, 1], [2, -2]])
    assert all(exact[k] for k in ("linear_representation_exact", "gamma_cross_exact", "gamma_factorization_exact", "r_a_exact")), exact

    again = reluid.Network.from_json(net.to_json())
    assert again.to_flat() == net.to_flat()
    assert json.loads(net.to_json())["format_version"] == 1

    try:
        reluid.Network([1, 1, 1], [1.0, math.nan, 0.0, 0.0])
    except ValueError:
        pass
    else:
        raise AssertionError("non-finite parameters must be rejected")

    print("smoke test ok")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Imports the compiled bindings and walks one generate/solve/run loop.

Build first: cargo build -p opdop-py
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def locate_cdylib():
    for profile in ("release", "debug"):
        candidate = ROOT / "target" / profile / "libopdop_py.so"
        if candidate.exists():
            return candidate
    sys.exit("libopdop_py.so not found; run `cargo build -p opdop-py` first")


def main():
    staging = Path(tempfile.mkdtemp(prefix="opdop-py-"))
    shutil.copy2(locate_cdylib(), staging / "opdop_py.so")
    sys.path.insert(0, str(staging))
    import opdop_py

    model = opdop_py.Model.random(4, 2, 3, 0.9, 7)
    assert (model.num_states, model.num_actions, model.horizon) == (4, 2, 3)
    assert model.utility_floor == 0.9
    print(f"generated {model!r}")

    hs = opdop_py.solve_hindsight(model)
    assert hs.duality_gap <= 1e-8
    assert hs.slater_gap > 0.0
    assert hs.dual >= 0.0
    for step in hs.policy:
        for row in step:
            assert all(p >= 0.0 for p in row)
            assert math.isclose(sum(row), 1.0, abs_tol=1e-9)
    v_r, v_g = opdop_py.evaluate(model, hs.policy)
    assert math.isclose(v_r, hs.value, abs_tol=1e-8)
    assert v_g >= model.utility_floor - 1e-8
    print(f"hindsight value {hs.value:.6f}, multiplier {hs.dual:.6f}, "
          f"utility {v_g:.6f} >= floor {model.utility_floor}")

    path = staging / "model.json"
    model.save(str(path))
    reloaded = opdop_py.Model.load(str(path))
    assert math.isclose(opdop_py.solve_hindsight(reloaded).value, hs.value, abs_tol=1e-12)
    print("save/load round trip preserved the LP value")

    grid = opdop_py.Model.gridworld(3, 3, 5, [1], 4.0)
    assert grid.num_states == 9 and grid.num_actions == 4
    print(f"gridworld {grid!r}")

    for backend, episodes in (("tabular", 150), ("lstd", 60)):
        res = opdop_py.run(model, backend, episodes, seed=3)
        assert res.backend == backend and res.episodes == episodes
        assert len(res.regret_curve) == episodes
        assert len(res.violation_curve) == episodes
        assert res.violation >= 0.0
        assert res.regret == res.regret_curve[-1]
        assert all(0.0 <= y <= res.dual_cap for y in res.dual_curve)
        assert all(0.0 <= r <= 1.0 for r in res.optimism)
        print(f"{backend} run: regret {res.regret:.3f}, violation {res.violation:.3f}, "
              f"optimism {res.optimism[0]:.2%}/{res.optimism[1]:.2%}")

    try:
        opdop_py.run(model, "dqn", 10)
    except ValueError:
        pass
    else:
        sys.exit("unknown backend must raise ValueError")
    try:
        opdop_py.Model.random(3, 2, 2, 9.0, 0)
    except ValueError:
        pass
    else:
        sys.exit("a floor above the horizon must raise ValueError")

    print("smoke test passed")


if __name__ == "__main__":
    main()

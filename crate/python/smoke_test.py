"""Smoke test for the shapecal Python extension.

Build the module first, for example with `maturin develop -m crates/python/Cargo.toml`
or by copying `target/release/libshapecal.so` to `shapecal.so` on the Python path.
"""

import json
import math
import sys
import tempfile


def main() -> int:
    import shapecal

    bump = shapecal.BendingBump(0.25, 64)
    ref = bump.reference
    assert len(ref) == 65
    assert abs(ref.arc_length() - math.pi * 0.25) < 1e-3 * math.pi * 0.25

    truth = bump.deform([400.0, 0.3], 100.0)
    apex = len(truth) // 2
    assert abs(truth.nodes[apex][0] - ref.nodes[apex][0] - 0.05) < 1e-12
    assert bump.deform([100.0, 0.0], 100.0) is None

    assert shapecal.cpp(truth, truth) == 0.0
    assert shapecal.rkhs_sc(truth, truth, 0.005) == 0.0
    moved = shapecal.InterfaceMesh([(x, y + 0.01) for x, y in truth.nodes])
    assert shapecal.rkhs_sc(moved, truth, 0.005) > 0.0
    assert abs(shapecal.log_likelihood(0.0, 0.01, 10) - 36.862316527834186) < 1e-12

    box = [(100.0, 800.0), (-0.8, 0.5)]
    design = [[lo + u * (hi - lo) for u, (lo, hi) in zip(p, box)] for p in shapecal.sobol_points(2, 60)]
    log_liks = []
    for e, nu in design:
        mesh = bump.deform([e, nu], 100.0)
        if mesh is None:
            log_liks.append(None)
        else:
            d = shapecal.rkhs_sc(mesh, truth, 0.005)
            log_liks.append(shapecal.log_likelihood(d, math.sqrt(0.0005), 1))
    assert any(v is None for v in log_liks)

    gp = shapecal.fit_gp(design, log_liks, box, restarts=2, seed=1)
    mean, var = gp.predict([400.0, 0.3])
    assert math.isfinite(mean) and var >= 0.0
    again = shapecal.GPModel.from_json(gp.to_json())
    assert abs(again.predict_mean([400.0, 0.3]) - mean) <= 1e-10 * abs(mean)

    prior = json.dumps([{"kind": "uniform", "lo": lo, "hi": hi} for lo, hi in box])
    rows, weights, _, gammas = shapecal.smc_on_gp(gp, prior, n_particles=500, n_rejuvenation=5, seed=2)
    assert len(rows) == 500 and abs(sum(weights) - 1.0) < 1e-9 and gammas[-1] == 1.0
    pm, cov = shapecal.weighted_moments(rows, weights)
    assert 100.0 < pm[0] < 800.0 and cov[0][0] > 0.0

    with tempfile.TemporaryDirectory() as out:
        config = {"design": {"n_train": 40}, "gp": {"restarts": 2},
                  "smc": {"n_particles": 300, "zeta": 0.9, "n_rejuvenation": 3}}
        path = shapecal.run_pipeline(json.dumps(config), out)
        with open(f"{path}/summary.json") as f:
            summary = json.load(f)
        assert summary["n_particles"] == 300

    print("shapecal smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())

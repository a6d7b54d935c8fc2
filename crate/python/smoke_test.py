"""Smoke test for the Python bindings.

Build and install first:

    pip install --no-build-isolation -e crates/python
    python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import cbf_diffusion as cd


def check_specs():
    disc = cd.BarrierSpec.ellipse([0.0, 0.0], [2.0, 1.0])
    assert disc.kind == "ellipse" and not disc.is_pair
    # b is zero on the boundary, negative inside.
    assert abs(disc.eval([2.0, 0.0])) < 1e-12
    assert disc.eval([0.0, 0.0]) < 0.0
    g, g_next = disc.gradient([1.0, 1.0])
    assert g_next is None and len(g) == 2

    rows = cd.BarrierSpec.speed_dependent_box([0.0, 0.0], [1.0, 1.0], 0.5)
    assert len(rows) == 4 and all(r.is_pair for r in rows)
    inside = [r.eval([0.5, 0.5], [0.6, 0.5]) for r in rows]
    assert min(inside) > 0.0

    specs = cd.parse_specs(
        """
[[specs]]
kind = "quartic_super_ellipse"
center = [1.0, 1.0]
axes = [0.5, 0.5]
dims = [0, 1]
"""
    )
    assert len(specs) == 1 and specs[0].kind == "quartic_super_ellipse"

    try:
        cd.BarrierSpec.ellipse([0.0, 0.0], [-1.0, 1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("negative axis accepted")


def check_qp():
    # Project (0, 0) onto u_0 + u_1 >= 1: the answer is (0.5, 0.5).
    row = cd.ConstraintRow([(0, 1.0), (1, 1.0)], 1.0)
    sol = cd.solve_projection([0.0, 0.0], [row])
    assert sol["converged"]
    assert all(abs(u - 0.5) < 1e-9 for u in sol["u_star"])

    # Two contradictory rows only work with a relaxation variable.
    rows = [
        cd.ConstraintRow([(0, 1.0)], 1.0, 1.0, 0),
        cd.ConstraintRow([(0, -1.0)], 1.0),
    ]
    sol = cd.solve_projection([0.0], rows, relax_dim=1)
    assert sol["converged"]
    assert sol["u_star"][0] <= -1.0 + 1e-9


def check_pipeline(root: Path):
    spec_file = root / "specs.toml"
    spec_file.write_text(
        """
[[specs]]
kind = "ellipse"
center = [4.0, 4.0]
axes = [0.7, 0.7]
dims = [0, 1]
"""
    )
    cfg_file = root / "tiny.toml"
    cfg_file.write_text(
        f"""
seed = 1
out_dir = "{root / 'out'}"

[maze]
specs_file = "specs.toml"

[data]
n_traj = 16
horizon = 8

[schedule]
steps = 10

[model]
hidden = 16
hidden_layers = 1
time_embedding = 8

[train]
epochs = 2
batch_size = 8

[bench]
episodes = 2
"""
    )
    cfg = cd.Config.load(cfg_file)
    assert cfg.seed == 1 and len(cfg.hash()) == 16
    assert cd.Config.from_toml(cfg.to_toml()).hash() == cfg.hash()

    cd.gen_data(cfg)
    trained = cd.train(cfg)
    assert math.isfinite(trained["final_loss"])

    planner = cd.Planner(cfg)
    episode = planner.sample("ros", 0)
    assert len(episode["world"]) == 9
    assert episode["min_barrier"] >= -1e-5

    cfg.set_methods(["off", "ros"])
    report = cd.bench(cfg)
    assert [m["method"] for m in report["methods"]] == ["off", "ros"]

    out = cd.plan(cfg, "tvs", 1)
    assert Path(out["episodes"][0]["trajectory"]).read_text().startswith("# artifact=")

    try:
        cd.plan(cfg, "nonsense")
    except RuntimeError as e:
        assert "[config]" in str(e)
    else:
        raise AssertionError("unknown method accepted")


def main():
    check_specs()
    check_qp()
    with tempfile.TemporaryDirectory() as tmp:
        check_pipeline(Path(tmp))
    print("python smoke test: ok")


if __name__ == "__main__":
    main()

"""Builds the extension with cargo and exercises it from Python.

Run from the repository root:  python3 python/smoke_test.py
"""

import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build_module() -> Path:
    subprocess.run(["cargo", "build", "--release", "-p", "ssn-python"], cwd=ROOT, check=True)
    lib = ROOT / "target" / "release" / "libssn.so"
    dest = Path(tempfile.mkdtemp()) / "ssn.so"
    shutil.copy(lib, dest)
    return dest.parent


def main() -> None:
    sys.path.insert(0, str(build_module()))
    import ssn

    assert ssn.prox_l1([3.0, -0.5, -2.0], 1.0) == [2.0, 0.0, -1.0]
    assert "s4n-vr" in ssn.methods()

    p = ssn.Problem.synthetic(400, 30, density=0.3, seed=1)
    assert (p.n_points, p.dim) == (400, 30)
    x0 = [0.0] * p.dim
    assert abs(p.objective(x0) - math.log(2.0)) < 1e-12

    # directional derivative against a central difference
    x = [0.1 * ((i % 5) - 2) for i in range(p.dim)]
    v = [1.0 if i % 3 == 0 else -0.5 for i in range(p.dim)]
    g = p.gradient(x)
    h = 1e-6
    xp = [a + h * b for a, b in zip(x, v)]
    xm = [a - h * b for a, b in zip(x, v)]
    smooth = lambda z: p.objective(z) - p.mu * sum(abs(t) for t in z)
    fd = (smooth(xp) - smooth(xm)) / (2 * h)
    assert abs(fd - sum(a * b for a, b in zip(g, v))) < 1e-6
    assert len(p.hess_vec(x, v, indices=[0, 1, 2])) == p.dim

    x_star, psi_star, res = ssn.reference(p)
    assert res < 1e-10 and p.full_residual(x_star) < 1e-10

    for method in ["s4n-h", "s4n-vr", "adagrad"]:
        run = ssn.solve(p, method, seed=3, max_epochs=10.0, target=1e-6, psi_star=psi_star)
        s = run.summary
        last = run.records[-1]
        print(f"{method:8s} status={s['status']:10s} iters={s['iterations']:4d} "
              f"epochs={last['epochs']:.2f} rel_err={ssn.relative_error(s['final_psi'], psi_star):.2e}")
        assert len(run) == len(run.records) and len(run.x) == p.dim

    report = ssn.diag("metric-bound", trials=200)
    assert report["report"]["pass"], report

    try:
        ssn.solve(p, "newton-ish")
    except ValueError as e:
        assert "unknown method" in str(e)
    else:
        raise AssertionError("bad method name accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()

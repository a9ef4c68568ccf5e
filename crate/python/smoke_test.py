"""Exercise the sdmp extension end to end on a tiny problem.

Install first:  pip install --no-build-isolation crates/python
Run from the repository root:  python3 python/smoke_test.py
"""

import pathlib
import sys
import tempfile

import numpy as np

import sdmp

ROOT = pathlib.Path(__file__).resolve().parent.parent


def check(name, ok, detail=""):
    print(f"{'ok  ' if ok else 'FAIL'} {name} {detail}")
    return ok


def main():
    results = []
    rng = np.random.default_rng(0)

    g = sdmp.Geometry(32, 40)
    x = rng.random((32, 32))
    p = rng.random(g.sino_shape)
    lhs = float(np.sum(g.forward(x) * p))
    rhs = float(np.sum(x * g.adjoint(p)))
    results.append(check("adjoint", abs(lhs - rhs) <= 1e-9 * abs(lhs), f"{lhs:.6g} vs {rhs:.6g}"))

    model = sdmp.SpectralModel()
    y = model.forward(150.0, 2500.0)
    back = model.inverse(*y)
    results.append(check("spectral inverse", np.allclose(back, (150.0, 2500.0), rtol=1e-6), str(back)))

    rec = sdmp.simulate(seed=3, image_size=32, views=40)
    results.append(check("simulate shapes", rec["x"].shape == (2, 32, 32) and rec["y"].shape == (2, 40, 48)))

    img = rec["x"][1]
    results.append(check("psnr identical", sdmp.psnr(img, img, 1000.0) == 99.0))
    results.append(check("ssim identical", abs(sdmp.ssim(img, img, 1000.0) - 1.0) < 1e-12))

    with tempfile.TemporaryDirectory() as out:
        rows = sdmp.run_pipeline(str(ROOT / "configs" / "smoke.toml"), out)
        results.append(check("pipeline rows", len(rows) > 0, f"{len(rows)} rows"))
        models = pathlib.Path(out) / "models"
        net = sdmp.DecompNet.load(str(models / "decomp.sdnw"))
        water = sdmp.Denoiser.load(str(models / "denoiser_water.sdnw"))
        results.append(check("denoiser material", water.material == "water"))

        g90 = sdmp.Geometry(64, 90)
        scan = sdmp.simulate(seed=7, image_size=64, views=90)
        recon = sdmp.reconstruct(g90, scan["y"], scan["counts"], water, decomp=net, t_sample=5)
        truth = scan["x"][1]
        score = sdmp.psnr(recon, truth, float(truth.max()))
        results.append(check("reconstruct", recon.shape == (64, 64) and np.isfinite(recon).all() and recon.min() >= 0, f"psnr {score:.2f} dB"))

    passed = sum(results)
    print(f"{passed}/{len(results)} checks passed")
    return 0 if passed == len(results) else 1


if __name__ == "__main__":
    sys.exit(main())

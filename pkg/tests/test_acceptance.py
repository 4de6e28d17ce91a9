"""End-to-end acceptance checks, one test per criterion, each printing a PASS/FAIL line."""
import json
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from gatedrecon.experiments import (ablation_setup, calibration_model, calibration_report, calibration_setup,
                                    eval_options, evaluate_views)
from gatedrecon.gating import GatingParams, profile, profile_numeric_oracle
from gatedrecon.metrics import PSNR_CAP, depth_metrics, occupancy_metrics, psnr, ssim
from gatedrecon.render import RenderOptions, render_gated, render_image, render_rays
from gatedrecon.sampling import quadrature_weights
from gatedrecon.synthio import default_scene, load_dataset, simulate_dataset
from gatedrecon.train import fit

import gradcheck
from conftest import TINY_RES, tiny_spec
from scenes import (OCC_LASER, occluder_gating, occluder_rays, occluder_scene, plane_gating, plane_modules,
                    plane_options, plane_oracle, plane_rays, plane_scene, wall_shadow_oracle)


@pytest.fixture
def verdict(request):
    """Print one ``criterion N: PASS|FAIL`` line to the terminal, then assert."""
    tr = request.config.pluginmanager.getplugin("terminalreporter")

    def say(n: int, ok: bool, detail: str):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        else:
            print(line)
        assert ok, line

    return say


# -- 1 -------------------------------------------------------------------------------------


def test_criterion_1_profile_oracle(verdict):
    t0 = time.time()
    g = GatingParams(xi=(240.0, 500.0, 900.0), t_l=(240.0, 180.0, 100.0), t_g=(300.0, 450.0, 600.0), d0=0.7)
    worst, n, cases = 0.0, 0, set()
    per = 10_000 // 3 + 1
    for k in range(3):
        xi, tl, tg = g.xi[k], g.t_l[k], g.t_g[k]
        # range covers zero before the rise, rise, plateau, fall and zero after; edges added exactly
        t = np.concatenate([np.linspace(xi - tl - 50, xi + tg + 50, per - 4), [xi - tl, xi, xi + tg - tl, xi + tg]])
        z = t * g.c - g.d0
        a = profile(z, k, g)
        o = profile_numeric_oracle(z, k, g, n_steps=1000)
        cases |= set(np.digitize(t, [xi - tl, xi, xi + tg - tl, xi + tg]).tolist())
        # relative error; below 1e-3 ns (zero support, edge tips) this holds values to 1e-9 ns absolute
        worst = max(worst, float(np.max(np.abs(a - o) / np.maximum(np.abs(o), 1e-3))))
        n += len(z)
    dt = time.time() - t0
    ok = worst <= 1e-6 and n >= 10_000 and cases == {0, 1, 2, 3, 4} and dt < 5.0
    verdict(1, ok, f"{n} points, all 5 cases, max rel err {worst:.2e}, {dt:.2f} s")


# -- 2 -------------------------------------------------------------------------------------


def test_criterion_2_gradient_suite(verdict):
    t0 = time.time()
    res = gradcheck.SuiteResult()
    for seed in (0, 1, 2):
        gradcheck.check(gradcheck.random_problem(seed), result=res)
    dt = time.time() - t0
    for name, i in res.excluded:
        print(f"kink exclusion: {name}[{i}]")
    for f in res.failures:
        print("gradient mismatch:", f)
    ok = res.rate >= 0.99 and res.groups == {"fields", "extrinsics", "gating", "laser"} and dt < 300
    verdict(2, ok, f"{res.passed}/{res.checked} entries pass, {len(res.excluded)} kink exclusions, "
                   f"groups {sorted(res.groups)}, {dt:.0f} s")


# -- 3 -------------------------------------------------------------------------------------


def test_criterion_3_single_surface(verdict):
    g = plane_gating()
    sc, prop = plane_scene()
    gm, il = plane_modules(g)
    rays = plane_rays()
    ref = plane_oracle(rays, g)
    with torch.no_grad():
        rel = max(float(np.max(np.abs(render_gated(rays, k, sc, prop, gm, il, plane_options()).numpy() - ref[:, k])
                            / ref[:, k])) for k in range(3))
        late = g.replace(xi=(900, 950, 1000))
        gl, il2 = plane_modules(late)
        excess = float(np.max(render_rays(sc, prop, gl, il2, rays, plane_options()).gated.numpy()
                              - np.asarray(late.dark)))
    ok = rel <= 1e-3 and excess <= 1e-6
    verdict(3, ok, f"max rel err {rel:.2e} over 3 slices, outside-gate excess {excess:.1e}")


# -- 4 -------------------------------------------------------------------------------------


def test_criterion_4_shadows(verdict):
    rays = occluder_rays()
    with_card, prop = occluder_scene(True)
    without, _ = occluder_scene(False)
    gm, il = plane_modules(occluder_gating(), OCC_LASER)
    opts = RenderOptions(n_samples=128, n_coarse=64, n_shadow=64, n_shadow_coarse=32, topk=16, chunk=1024)
    a = render_image(with_card, prop, gm, il, rays, opts)
    b = render_image(without, prop, gm, il, rays, opts)
    cls = wall_shadow_oracle(rays)
    umbra, lit = cls == 1, cls == 0
    psi_umbra = float(a["shadow"][umbra].max())
    psi_lit = float(a["shadow"][lit].min())
    ratio = float(np.max(a["active"][umbra] / b["active"][umbra]))
    dpass = float(np.max(np.abs(a["passive"][cls >= 0] - b["passive"][cls >= 0])))
    ok = umbra.sum() > 50 and psi_umbra <= 0.05 and ratio <= 1e-3 and psi_lit >= 0.95 and dpass <= 1e-9
    verdict(4, ok, f"{umbra.sum()} umbra px psi<={psi_umbra:.1e}, active ratio {ratio:.1e}; "
                   f"{lit.sum()} lit px psi>={psi_lit:.4f}; passive diff {dpass:.1e}")


# -- 5, 6 ----------------------------------------------------------------------------------


@pytest.fixture(scope="session")
def street_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("street")
    return load_dataset(simulate_dataset(default_scene(), out, seed=0, log=None))


_RUNS = {}


def _run(kind, ds):
    if kind not in _RUNS:
        cfg, weights, model_kw = ablation_setup(kind)
        t0 = time.time()
        res = fit(ds, cfg, weights, model_kw=model_kw, log=None)
        rep = evaluate_views(res.model, ds, ds.views("test"), eval_options(cfg))
        rep["seconds"] = time.time() - t0
        _RUNS[kind] = rep
        print(kind, json.dumps(rep))
    return _RUNS[kind]


def test_criterion_5_reconstruction(street_dataset, verdict):
    rep = _run("full", street_dataset)
    ok = rep["mae_fraction"] <= 0.02 and rep["psnr"] >= 30.0 and rep["seconds"] <= 1800
    verdict(5, ok, f"depth MAE {rep['depth']['mae']:.2f} m = {100 * rep['mae_fraction']:.2f}% of "
                   f"{rep['depth_range']:.1f} m (target 2%), PSNR {rep['psnr']:.2f} dB (target 30), "
                   f"{rep['seconds'] / 60:.1f} min")


def test_criterion_6_ablations(street_dataset, verdict):
    full = _run("full", street_dataset)["depth"]["mae"]
    nd = _run("no_depth", street_dataset)["depth"]["mae"]
    ns = _run("no_shadow", street_dataset)["depth"]["mae"]
    ok = nd > full and ns > full
    verdict(6, ok, f"held-out MAE full {full:.2f} m, no depth loss {nd:.2f} m, no shadow model {ns:.2f} m")


# -- 7 -------------------------------------------------------------------------------------


def test_criterion_7_self_calibration(street_dataset, verdict):
    cfg, weights = calibration_setup()
    model = calibration_model(street_dataset, 1.1)
    start = model.gating.to_params().xi
    res = fit(street_dataset, cfg, weights, model=model, log=None)
    rep = calibration_report(res.model, street_dataset.gating)
    ok = rep["max_xi_rel_error"] <= 0.01
    verdict(7, ok, "xi start " + ", ".join(f"{x:.1f}" for x in start) + " -> "
                   + ", ".join(f"{x:.2f}" for x in rep["estimated"]["xi"]) + " truth "
                   + ", ".join(f"{x:.1f}" for x in street_dataset.gating.xi)
                   + f", max rel err {rep['max_xi_rel_error']:.2e}")


# -- 8 -------------------------------------------------------------------------------------


def test_criterion_8_metrics(verdict):
    gt = np.array([4.0, 8.0, 16.0, 2.0, 0.5])
    checks = {}
    m = depth_metrics(gt, gt)
    checks["identity"] = (m.rmse, m.mae, m.ard, m.delta1, m.delta2, m.delta3) == (0, 0, 0, 1, 1, 1)
    m = depth_metrics(1.1 * gt, gt)
    checks["ten percent"] = abs(m.ard - 0.1) < 1e-12 and m.delta1 == 1.0
    m = depth_metrics(1.25 * gt, gt)
    checks["strict delta"] = m.delta1 == 0.0 and m.delta2 == 1.0
    occ = np.zeros((4, 4, 4), bool)
    occ[:2, :2, :2] = True
    far = np.zeros_like(occ)
    far[2:, 2:, 2:] = True
    extra = occ.copy()
    extra[2:, :2, :2] = True
    o1, o2, o3 = occupancy_metrics(occ, occ), occupancy_metrics(far, occ), occupancy_metrics(extra, occ)
    checks["iou identity"] = (o1.iou, o1.precision, o1.recall) == (1.0, 1.0, 1.0)
    checks["iou disjoint"] = (o2.iou, o2.precision, o2.recall) == (0.0, 0.0, 0.0)
    checks["iou half"] = (o3.precision, o3.recall, o3.iou) == (0.5, 1.0, 0.5)
    img = np.random.default_rng(0).random((16, 16))
    checks["psnr identity"] = psnr(img, img) == PSNR_CAP and abs(ssim(img, img) - 1) < 1e-12
    checks["psnr 20 dB"] = abs(psnr(img + 0.1, img) - 20.0) < 1e-9 and ssim(img + 0.1, img) < 1
    sig = torch.rand(64, 32, dtype=torch.float64) * 3
    dl = torch.rand(64, 32, dtype=torch.float64)
    w, _, t_final = quadrature_weights(sig, dl)
    checks["telescoping"] = float((w.sum(-1) - (1 - t_final)).abs().max()) < 1e-12
    bad = [k for k, v in checks.items() if not v]
    verdict(8, not bad, f"{len(checks) - len(bad)}/{len(checks)} examples exact" + (f", failed {bad}" if bad else ""))


# -- 9 -------------------------------------------------------------------------------------


def _cli(*args):
    r = subprocess.run([sys.executable, "-m", "gatedrecon", *map(str, args)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    return r


def test_criterion_9_determinism(tmp_path, verdict):
    scene = tmp_path / "scene.json"
    scene.write_text(json.dumps({"scene": tiny_spec().to_dict(), "resolution": list(TINY_RES)}))
    cfg = tmp_path / "fit.json"
    cfg.write_text(json.dumps({
        "model": {"resolution": 12, "appearance_resolution": 6},
        "train": {"batch_rays": 128, "chunk_rays": 32, "proposal_every": 3, "proposal_resolution": 4,
                  "render": {"n_samples": 24, "n_coarse": 16, "n_shadow": 8, "n_shadow_coarse": 8, "topk": 4,
                             "chunk": 256}},
    }))
    outputs = []
    for run, threads in (("a", 1), ("b", 1), ("c", 3)):
        d = tmp_path / run
        _cli("simulate", "--config", scene, "--out", d / "data", "--seed", 4, "--deterministic", "--threads",
             threads, "--quiet")
        man = d / "data" / "manifest.json"
        _cli("fit", "--manifest", man, "--config", cfg, "--out", d / "fit", "--steps", 6, "--seed", 4,
             "--deterministic", "--threads", threads, "--quiet")
        _cli("eval", "--manifest", man, "--checkpoint", d / "fit" / "checkpoint", "--out", d / "eval",
             "--deterministic", "--threads", threads)
        files = [d / "fit" / "checkpoint" / "grid.gfgrid", d / "fit" / "checkpoint" / "calib.json",
                 d / "fit" / "metrics.json", d / "fit" / "history.csv", d / "eval" / "metrics.json"]
        frames = sorted((d / "data" / "frames").glob("*.pfm"))
        blob = [f.read_bytes() for f in files + frames]
        hist = [ln.rsplit(",", 1)[0] for ln in blob[3].decode().splitlines()]  # drop wall-clock column
        outputs.append(blob[:3] + [hist] + blob[4:])
    same_runs = outputs[0] == outputs[1]
    same_threads = outputs[0] == outputs[2]
    verdict(9, same_runs and same_threads, f"checkpoint, metrics and {len(frames)} frames identical across runs "
                                           f"({same_runs}) and 1 vs 3 threads ({same_threads})")

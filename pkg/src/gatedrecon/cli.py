"""Command-line frontend: simulate, fit, render, calib, eval."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class ConfigError(ValueError):
    pass


def _read_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{p}: {err}") from err
    if not isinstance(d, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return d


def _train_setup(args, d: dict, base):
    """TrainConfig / LossWeights / model kwargs from ``base`` defaults, then config, then flags."""
    from .render import RenderOptions
    from .train import LossWeights, TrainConfig

    cfg, weights = base[0], base[1]
    try:
        tr = cfg.to_dict()
        tr.update(d.get("train", {}))
        if "render" in d.get("train", {}):
            r = cfg.render.to_dict()
            r.update(d["train"]["render"])
            tr["render"] = r
        if args.steps is not None:
            tr["steps"] = args.steps
        if args.seed is not None:
            tr["seed"] = args.seed
        if args.deterministic:
            tr["deterministic"] = True
        if args.threads is not None:
            tr["threads"] = args.threads
        tr["render"] = RenderOptions.from_dict(tr["render"])
        cfg = TrainConfig(**tr)
        lw = {**weights.__dict__, **d.get("loss", {})}
        weights = LossWeights(**lw)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return cfg, weights


def _summary(line: str) -> None:
    print(line, flush=True)


# -- subcommands ----------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .parallel import configure_determinism
    from .synthio import SceneSpec, default_scene, simulate_dataset

    configure_determinism(args.deterministic, args.threads)
    d = _read_json(args.config)
    if d:
        spec = SceneSpec.from_dict(d.get("scene", d))
    else:
        spec = default_scene()
    res = d.get("resolution") if d else None
    path = simulate_dataset(spec, args.out, seed=args.seed or 0, resolution=res,
                            log=None if args.quiet else _summary)
    _summary(f"wrote {path}")
    return 0


def cmd_fit(args) -> int:
    from .experiments import evaluate_views, reconstruction_setup
    from .metrics import write_report
    from .synthio import load_dataset

    d = _read_json(args.config)
    base = reconstruction_setup()
    cfg, weights = _train_setup(args, d, base)
    model_kw = {**base[2], **d.get("model", {})}
    ds = load_dataset(args.manifest)
    from .train import fit

    res = fit(ds, cfg, weights, out_dir=args.out, log=None if args.quiet else _summary, model_kw=model_kw)
    # wall-clock time goes to stdout only, so the report is reproducible bit for bit
    last = res.history[-1] if res.history else {}
    report = dict(steps=res.steps, final={k: v for k, v in last.items() if k != "seconds"})
    _summary(f"fit {res.steps} steps in {res.seconds:.1f} s")
    test = ds.views("test")
    if test and not args.no_eval:
        report["test"] = evaluate_views(res.model, ds, test, cfg.render)
        _summary(f"test depth MAE {report['test']['depth']['mae']:.3f} m  PSNR {report['test']['psnr']:.2f} dB")
    write_report(Path(args.out) / "metrics.json", report)
    _summary(f"checkpoint {Path(args.out) / 'checkpoint'}")
    return 0


def cmd_calib(args) -> int:
    from .experiments import calibration_model, calibration_report, calibration_setup
    from .metrics import write_report
    from .synthio import load_dataset
    from .train import fit

    d = _read_json(args.config)
    cfg, weights = _train_setup(args, d, calibration_setup())
    ds = load_dataset(args.manifest)
    perturb = args.perturb if args.perturb is not None else float(d.get("xi_perturbation", 0.1))
    model = calibration_model(ds, 1.0 + perturb)
    res = fit(ds, cfg, weights, model=model, out_dir=args.out, log=None if args.quiet else _summary)
    report = calibration_report(res.model, ds.gating)
    write_report(Path(args.out) / "calibration.json", report)
    _summary("xi estimated " + ", ".join(f"{x:.3f}" for x in report["estimated"]["xi"]) +
             f"  max rel error {report['max_xi_rel_error']:.2e}")
    return 0


def _pick_views(ds, spec: str) -> list[int]:
    if spec in ("train", "val", "test"):
        return ds.views(spec)
    if spec == "all":
        return list(range(len(ds.poses)))
    try:
        v = [int(x) for x in spec.split(",")]
    except ValueError as err:
        raise ConfigError(f"bad --views {spec!r}") from err
    if any(i < 0 or i >= len(ds.poses) for i in v):
        raise ConfigError("view index out of range")
    return v


def cmd_render(args) -> int:
    from .experiments import render_view
    from .parallel import configure_determinism
    from .render import RenderOptions
    from .synthio import SLICE_KEYS, load_dataset, read_manifest, write_pfm
    from .train import load_checkpoint

    configure_determinism(args.deterministic, args.threads)
    d = _read_json(args.config)
    try:
        opts = RenderOptions.from_dict({**RenderOptions(n_samples=128, n_coarse=96, n_shadow=24,
                                                        n_shadow_coarse=16, topk=8).to_dict(), **d.get("render", {})})
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    ds = load_dataset(args.manifest)
    ids = [fr["id"] for fr in read_manifest(args.manifest)["frames"]]
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v in _pick_views(ds, args.views):
        r = render_view(model, ds, v, opts)
        for k, key in enumerate(SLICE_KEYS):
            write_pfm(out / f"{ids[v]}_{key}.pfm", r["images"][k])
        write_pfm(out / f"{ids[v]}_depth.pfm", r["depth"])
        write_pfm(out / f"{ids[v]}_shadow.pfm", r["shadow"])
        for k in range(3):
            write_pfm(out / f"{ids[v]}_direct{k}.pfm", r["active"][k])
        write_pfm(out / f"{ids[v]}_ambient.pfm", r["passive_sum"])
        _summary(f"rendered view {ids[v]}")
    return 0


def cmd_eval(args) -> int:
    from .experiments import evaluate_views
    from .metrics import depth_metrics, psnr, ssim, write_report
    from .render import RenderOptions
    from .synthio import SLICE_KEYS, load_dataset, read_manifest, read_pfm
    from .train import load_checkpoint

    if (args.checkpoint is None) == (args.pred is None):
        raise ConfigError("eval needs exactly one of --checkpoint or --pred")
    from .parallel import configure_determinism

    configure_determinism(args.deterministic, args.threads)
    ds = load_dataset(args.manifest)
    views = _pick_views(ds, args.views)
    if args.checkpoint:
        opts = RenderOptions(n_samples=128, n_coarse=96, n_shadow=24, n_shadow_coarse=16, topk=8)
        report = evaluate_views(load_checkpoint(args.checkpoint), ds, views, opts)
    else:
        ids = [fr["id"] for fr in read_manifest(args.manifest)["frames"]]
        pred_root = Path(args.pred)
        pd, gd, pi, gi = [], [], [], []
        for v in views:
            dep = read_pfm(pred_root / f"{ids[v]}_depth.pfm")
            ok = np.isfinite(ds.depth[v])
            pd.append(dep[ok])
            gd.append(ds.depth[v][ok])
            pi.append(np.stack([read_pfm(pred_root / f"{ids[v]}_{k}.pfm") for k in SLICE_KEYS]))
            gi.append(ds.images[v])
        gt = np.concatenate(gd)
        dm = depth_metrics(np.concatenate(pd), gt)
        report = dict(depth=dm.to_dict(), psnr=psnr(np.stack(pi), np.stack(gi)),
                      ssim=float(np.mean([ssim(a, b) for A, B in zip(pi, gi) for a, b in zip(A, B)])),
                      depth_range=float(gt.max() - gt.min()), views=views)
        report["mae_fraction"] = dm.mae / report["depth_range"] if report["depth_range"] > 0 else float("nan")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "metrics.json", report)
    dm = report["depth"]
    _summary(f"MAE {dm['mae']:.4f} m  RMSE {dm['rmse']:.4f} m  ARD {dm['ard']:.4f}  delta1 {dm['delta1']:.4f}  "
             f"PSNR {report['psnr']:.2f} dB  SSIM {report['ssim']:.4f}")
    return 0


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gatedrecon", description="Gated-imaging simulation and reconstruction.")
    sub = p.add_subparsers(dest="command", required=True, metavar="{simulate,fit,render,calib,eval}")

    def common(sp, manifest=True):
        sp.add_argument("--config", help="JSON config file; flags override its values")
        sp.add_argument("--out", required=True, help="output directory (created if absent)")
        sp.add_argument("--seed", type=int, default=None, help="random seed")
        sp.add_argument("--deterministic", action="store_true",
                        help="single-threaded torch ops and fixed reduction order for bit-exact results")
        sp.add_argument("--threads", type=int, default=None, help="worker threads for chunked gradient evaluation")
        sp.add_argument("--steps", type=int, default=None, help="override the number of optimization steps")
        sp.add_argument("--quiet", action="store_true", help="only print final summaries")
        if manifest:
            sp.add_argument("--manifest", required=True, help="dataset manifest.json")

    s = sub.add_parser("simulate", help="render a synthetic gated dataset from a scene config")
    common(s, manifest=False)
    s.set_defaults(fn=cmd_simulate)
    s = sub.add_parser("fit", help="reconstruct a scene from a dataset")
    common(s)
    s.add_argument("--no-eval", action="store_true", help="skip held-out evaluation after fitting")
    s.set_defaults(fn=cmd_fit)
    s = sub.add_parser("render", help="render slices, depth and components from a checkpoint")
    common(s)
    s.add_argument("--checkpoint", required=True, help="checkpoint directory written by fit")
    s.add_argument("--views", default="test", help="train | val | test | all | comma-separated indices")
    s.set_defaults(fn=cmd_render)
    s = sub.add_parser("calib", help="recover gate delays from a perturbed start on the ground-truth scene")
    common(s)
    s.add_argument("--perturb", type=float, default=None,
                   help="relative perturbation of every gate delay (default 0.1)")
    s.set_defaults(fn=cmd_calib)
    s = sub.add_parser("eval", help="depth and image metrics of a checkpoint or of rendered maps")
    common(s)
    s.add_argument("--checkpoint", help="checkpoint directory to render and score")
    s.add_argument("--pred", help="directory of rendered PFMs named like the dataset frames")
    s.add_argument("--views", default="test", help="train | val | test | all | comma-separated indices")
    s.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    from .field import GridFormatError
    from .gating import ParameterDomainError
    from .illum import DegenerateRayError
    from .synthio import DataError, SceneSpecError
    from .train import NumericalError

    args = build_parser().parse_args(argv)
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        return args.fn(args)
    except (ConfigError, SceneSpecError, ParameterDomainError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GridFormatError, DegenerateRayError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

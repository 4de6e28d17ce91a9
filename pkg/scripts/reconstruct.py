"""Simulate the street scene, fit it (optionally with ablations) and print held-out metrics.

    python scripts/reconstruct.py --out runs/street [--ablations] [--steps N]
"""
import argparse
import json
import time
from pathlib import Path

from gatedrecon.experiments import ABLATIONS, ablation_setup, eval_options, evaluate_views
from gatedrecon.synthio import default_scene, load_dataset, simulate_dataset
from gatedrecon.train import fit


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, default=None, help="override the number of steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ablations", action="store_true", help="also fit without depth loss and without shadows")
    args = p.parse_args()
    out = Path(args.out)
    man = out / "data" / "manifest.json"
    if not man.exists():
        simulate_dataset(default_scene(), out / "data", seed=args.seed)
    ds = load_dataset(man)
    results = {}
    for kind in ABLATIONS if args.ablations else ("full",):
        cfg, weights, model_kw = ablation_setup(kind, args.steps, args.seed)
        t0 = time.time()
        res = fit(ds, cfg, weights, model_kw=model_kw, out_dir=out / kind)
        rep = evaluate_views(res.model, ds, ds.views("test"), eval_options(cfg))
        rep["seconds"] = time.time() - t0
        results[kind] = rep
        print(f"{kind}: MAE {rep['depth']['mae']:.2f} m ({100 * rep['mae_fraction']:.2f}% of range)  "
              f"PSNR {rep['psnr']:.2f} dB  {rep['seconds'] / 60:.1f} min", flush=True)
    (out / "results.json").write_text(json.dumps(results, indent=1))


if __name__ == "__main__":
    main()

"""Self-calibration of the gate delays on the simulated street scene.

    python scripts/calibrate.py --out runs/street [--perturb 0.1] [--steps N]
"""
import argparse
import json
from pathlib import Path

from gatedrecon.experiments import calibration_model, calibration_report, calibration_setup
from gatedrecon.synthio import default_scene, load_dataset, simulate_dataset
from gatedrecon.train import fit


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", required=True, help="output directory (dataset is reused if present)")
    p.add_argument("--perturb", type=float, default=0.1, help="relative offset applied to every xi at init")
    p.add_argument("--steps", type=int, default=None)
    args = p.parse_args()
    out = Path(args.out)
    man = out / "data" / "manifest.json"
    if not man.exists():
        simulate_dataset(default_scene(), out / "data", seed=0)
    ds = load_dataset(man)
    cfg, weights = calibration_setup() if args.steps is None else calibration_setup(args.steps)
    res = fit(ds, cfg, weights, model=calibration_model(ds, 1.0 + args.perturb), out_dir=out / "calib")
    rep = calibration_report(res.model, ds.gating)
    print(json.dumps(rep, indent=1))


if __name__ == "__main__":
    main()

"""Cross-validate aniso/iso x 3/6-label networks on a shared phantom pool.

    python3 scripts/run_phantom_experiment.py --out runs/phantoms

Prints per-run summaries and the directional comparisons (reported only).
"""

import argparse
import logging

from zoneseg import runtime
from zoneseg.experiment import ExperimentConfig, run_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", required=True)
    p.add_argument("--phantoms", type=int, default=12)
    p.add_argument("--folds", type=int, default=2)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--width-scale", default="1/4")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    runtime.set_threads(runtime.resolve_threads())
    cfg = ExperimentConfig(args.phantoms, args.folds, args.epochs, args.width_scale, args.seed, args.lr)
    result = run_experiment(cfg, args.out)
    for name, report in result.reports.items():
        for s in report.summary():
            if s["region"] == "all":
                print(f"{name:14s} {s['label']:8s} mean={s['mean']:.3f} sd={s['sd']:.3f} ({result.seconds[name]:.0f}s)")
    for c in result.claims:
        print(f"{c['claim']:36s} {c['left']:.3f} vs {c['right']:.3f} -> {'holds' if c['holds'] else 'does not hold'}")


if __name__ == "__main__":
    main()

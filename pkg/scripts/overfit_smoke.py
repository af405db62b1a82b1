"""Memorise one phantom: 1/8-width aniso net, no augmentation, lr 1e-3.

Runs without per-conv normalisation unless ``--norm`` is given; with it the
net fits TZ but typically not PZ within 300 steps.

    python3 scripts/overfit_smoke.py --epochs 300 --out runs/overfit
"""

import argparse
import time
from pathlib import Path

import numpy as np

from zoneseg import runtime
from zoneseg.augment import AugmentationConfig
from zoneseg.models import build_network
from zoneseg.training import Case, TrainingConfig, model_seed, prepare_case, train_model, write_curves, write_losses
from zoneseg.volume import synth_phantom


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", default="aniso")
    p.add_argument("--norm", action="store_true", help="keep per-conv instance normalisation")
    p.add_argument("--out")
    args = p.parse_args()
    runtime.set_threads(runtime.resolve_threads())
    image, labels, _ = synth_phantom(args.seed)
    cfg = TrainingConfig(variant=args.variant, lr=1e-3, width_scale="1/8", epochs=args.epochs, seed=args.seed,
                         normalization=args.norm, augmentation=AugmentationConfig.disabled())
    case = prepare_case(Case("phantom", image, labels), cfg)
    model = build_network(cfg.network_spec(), model_seed(cfg, 0))
    start = time.perf_counter()
    flog = train_model(model, [case], cfg, np.random.default_rng(args.seed))
    elapsed = time.perf_counter() - start
    final = {row[3]: row[4] for row in flog.curves if row[0] == args.epochs}
    print(f"{elapsed:.0f}s  loss {flog.losses[-1][2]:.4f}  " + "  ".join(f"{k} {v:.3f}" for k, v in final.items()))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_curves(flog.curves, out / "curves.csv")
        write_losses(flog.losses, out / "losses.csv")


if __name__ == "__main__":
    main()

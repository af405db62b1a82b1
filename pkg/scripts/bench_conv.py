"""Time forward and backward of one training step at a few widths.

    python3 scripts/bench_conv.py --widths 1/8 1/4
"""

import argparse
import time

import numpy as np

from zoneseg import runtime
from zoneseg.models import NetworkSpec, build_network
from zoneseg.tensor import Tensor, backward, no_grad
from zoneseg.training import weighted_cross_entropy


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--widths", nargs="+", default=["1/8", "1/4"])
    p.add_argument("--variant", default="aniso")
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args()
    runtime.set_threads(runtime.resolve_threads())
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 16, 64, 64)).astype(np.float32))
    labels = rng.integers(0, 3, (16, 64, 64))
    for scale in args.widths:
        model = build_network(NetworkSpec(args.variant, width_scale=scale), 0)
        fwd, step = [], []
        for _ in range(args.repeats):
            t = time.perf_counter()
            with no_grad():
                model.forward(x)
            fwd.append(time.perf_counter() - t)
            t = time.perf_counter()
            backward(weighted_cross_entropy(model.forward(x)[0], labels, [1, 2, 6]))
            step.append(time.perf_counter() - t)
        print(f"{args.variant} width {scale}: forward {min(fwd):.3f}s  forward+backward {min(step):.3f}s")


if __name__ == "__main__":
    main()

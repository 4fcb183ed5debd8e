"""Monte Carlo ceiling on test ranking accuracy for the heteroscedastic sine task.

A predictor that knows the true noise std exactly can still only order pairs
as well as the noise draws allow; this prints that ceiling per hetero_scale.
"""

import argparse

import numpy as np

from learnloss.data import SynthConfig, sine_noise_std


def ceiling(hetero_scale: float, noise: float, x_max: float, n: int, pairs: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    cfg = SynthConfig(kind="sine_regression", noise=noise, x_max=x_max, hetero_scale=hetero_scale)
    x = rng.uniform(-x_max, x_max, size=n)
    std = sine_noise_std(x, cfg)
    loss = (std * rng.normal(size=n)) ** 2
    i, j = rng.integers(0, n, size=(2, pairs))
    # predicted ties count as wrong, so a constant std scores 0
    keep = loss[i] != loss[j]
    return float(np.mean(np.sign(std[i] - std[j])[keep] == np.sign(loss[i] - loss[j])[keep]))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scales", type=float, nargs="+", default=[0, 2, 5, 10, 30, 100])
    ap.add_argument("--noise", type=float, default=0.1)
    ap.add_argument("--x-max", type=float, default=3.0)
    args = ap.parse_args()
    for h in args.scales:
        print(f"hetero_scale={h:g}: ceiling {ceiling(h, args.noise, args.x_max, 4000, 200_000, 0):.3f}")


if __name__ == "__main__":
    main()

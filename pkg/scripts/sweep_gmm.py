"""Grid over Gaussian-mixture noise and dimension for the LL-vs-random comparison.

Prints, per grid point, the paired final-accuracy differences and how often
the loss predictor correlates with real test losses better than entropy.
"""

import argparse
import itertools
import json
import time

import numpy as np

from learnloss.alsim import run_experiment
from learnloss.config import from_dict


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--base", default="configs/gmm_acceptance.json")
    ap.add_argument("--noise", type=float, nargs="+", default=[0.5, 0.8, 1.0])
    ap.add_argument("--dim", type=int, nargs="+", default=[2, 6, 10])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    base = json.load(open(args.base))
    base["strategies"] = ["random", "learned_loss"]
    base["seed"] = args.seed
    for noise, dim in itertools.product(args.noise, args.dim):
        raw = json.loads(json.dumps(base))
        raw["dataset"].update(noise=noise, dim=dim)
        t0 = time.perf_counter()
        res = run_experiment(from_dict(raw))

        def final(s, f):
            return np.array([getattr(t.records[-1], f) for t in res.trials[s]])

        diff = final("learned_loss", "test_metric") - final("random", "test_metric")
        wins = final("learned_loss", "pearson") > final("learned_loss", "pearson_entropy")
        print(f"noise={noise} dim={dim} ({time.perf_counter() - t0:.0f}s) "
              f"acc diff {np.round(diff, 4).tolist()} mean {diff.mean():+.4f} "
              f"| pearson LL>entropy {int(wins.sum())}/{len(wins)}", flush=True)


if __name__ == "__main__":
    main()

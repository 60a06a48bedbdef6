"""Full model vs single-component ablations on the synthetic majority-neighbor-type task.

    python3 scripts/run_ablation.py --seeds 5 > ablation.tsv
"""

import argparse
import sys

from hesrn.config import ABLATIONS
from hesrn.experiments import ablation_study, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--variants", nargs="*", default=["full", *ABLATIONS])
    args = ap.parse_args()
    variants = [None if v == "full" else v for v in args.variants]
    scores = ablation_study(range(args.seeds), variants, log=lambda s: print(s, file=sys.stderr, flush=True))
    print("variant\tmean_test_micro_f1\tper_seed")
    for name, mean in summarize(scores).items():
        print(f"{name}\t{mean:.4f}\t{','.join(f'{x:.4f}' for x in scores[name])}")


if __name__ == "__main__":
    main()

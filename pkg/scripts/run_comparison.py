"""District-specific vs whole-body comparison on the default phantom cohort.

    python3 scripts/run_comparison.py --out runs/comparison
    python3 scripts/run_comparison.py --seeds 17 --epochs 4   # quick look

Writes per-seed checkpoints, the metric tables of all seeds pooled, and
summary.txt with per-seed means, the paired t-test and the lesion baseline.
"""

import argparse
import logging
from pathlib import Path

from ct2pet.evaluation import build_report, emit_report
from ct2pet.experiment import run_comparison, summarize, toy_train_config
from ct2pet.phantom import PhantomConfig
from ct2pet.training import REPORTING_SEEDS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/comparison")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(REPORTING_SEEDS))
    ap.add_argument("--epochs", type=int, help="override the toy epoch count")
    ap.add_argument("--patches", type=int, help="override patches per epoch")
    ap.add_argument("--n", type=int, default=20, help="phantom cohort size")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    overrides = {}
    if args.epochs:
        overrides.update(total_epochs=args.epochs, decay_start_epoch=max(1, (3 * args.epochs) // 4))
    if args.patches:
        overrides["patches_per_epoch"] = args.patches
    tc = toy_train_config(**overrides)
    out = Path(args.out)
    result = run_comparison(PhantomConfig(n_patients=args.n), tc, args.seeds, out_dir=out)

    records = [r for s in result.seeds for r in s.records]
    # patients repeat across seeds, so the pooled tables carry no t-tests;
    # the seed-averaged test is in summary.txt
    emit_report(build_report(records, tests=False), out / "report")
    text = summarize(result)
    (out / "summary.txt").write_text(text + "\n")
    print(text)


if __name__ == "__main__":
    main()

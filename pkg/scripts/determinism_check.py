"""Run phantom -> train -> translate -> evaluate twice and compare every output byte for byte."""

import argparse
import filecmp
import sys
import tempfile
from pathlib import Path

from ct2pet.cli import main as cli

TINY = ["patch_size=16", "overlap=8", "base_channels=4", "depth=2", "disc_levels=2",
        "total_epochs=2", "decay_start_epoch=2", "patches_per_epoch=3", "val_every=1"]


def pipeline(root: Path) -> None:
    sets = [a for kv in TINY for a in ("--set", f"train.{kv}")]
    m = str(root / "cohort" / "manifest.jsonl")
    for argv in (
        ["phantom", "--out", str(root / "cohort"), "--n", "10", "--set", "phantom.dims=40, 40, 96"],
        ["train", "--manifest", m, "--scope", "all", "--out", str(root / "models")] + sets,
        ["translate", "--manifest", m, "--models", str(root / "models"), "--method", "proposed",
         "--out", str(root / "proposed")] + sets,
        ["translate", "--manifest", m, "--models", str(root / "models"), "--method", "competitor",
         "--out", str(root / "competitor")] + sets,
        ["evaluate", "--manifest", m, "--pred", str(root / "proposed"), str(root / "competitor"),
         "--out", str(root / "report")],
    ):
        if cli(argv) != 0:
            sys.exit(f"step failed: {' '.join(argv)}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--keep", help="directory to keep both runs in (default: temporary)")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(args.keep or tmp)
        a, b = root / "run_a", root / "run_b"
        pipeline(a)
        pipeline(b)
        files = [f for f in sorted(a.rglob("*")) if f.is_file() and f.name != "run.json"]
        diff = [f.relative_to(a) for f in files if not filecmp.cmp(f, b / f.relative_to(a), shallow=False)]
        print(f"{len(files)} files compared, {len(diff)} differ")
        for f in diff:
            print("  ", f)
    sys.exit(1 if diff else 0)


if __name__ == "__main__":
    main()

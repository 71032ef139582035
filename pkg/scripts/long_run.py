"""Full-length protocol on a REDD-style house: prepare, 10-fold training, evaluation.

Not part of the test suite. Expect days of CPU time at the default 2000 epochs.

    python3 scripts/long_run.py --root /data/redd/low_freq --house 1 --out runs/h1
"""

import argparse
import sys
from pathlib import Path

from convnilm.cli import main as cli


def run(args: list[str]) -> None:
    print("+ convnilm", " ".join(args), flush=True)
    code = cli(args)
    if code:
        sys.exit(code)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", required=True)
    p.add_argument("--house", type=int, default=1)
    p.add_argument("--dataset", default="redd", choices=("redd", "ukdale"))
    p.add_argument("--variant", default="base")
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--window", type=int, help="samples per window (default: one day)")
    p.add_argument("--out", required=True)
    a = p.parse_args()

    out = Path(a.out)
    data = out / "data"
    folds = f"train.k_folds={a.folds}"
    window = ["--window", str(a.window)] if a.window else []
    run(["prepare", "--dataset", a.dataset, "--root", a.root, "--house", str(a.house), *window,
         "--set", folds, "--out", str(data)])
    run(["train", "--data", str(data), "--variant", a.variant, "--epochs", str(a.epochs),
         "--set", folds, "--resume", "--out", str(out / "train")])
    for fold in range(a.folds):
        run(["eval", "--checkpoint", str(out / "train" / f"fold{fold}" / "best.ckpt"),
             "--data", str(data), "--out", str(out / "eval" / f"fold{fold}")])


if __name__ == "__main__":
    main()

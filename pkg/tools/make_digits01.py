"""Regenerate the bundled digits01.csv (8x8 digits, classes 0 and 1).

Needs scikit-learn, which ships the UCI optical digits set; the package
itself only reads the CSV.
"""
import csv
import sys
from pathlib import Path

from sklearn.datasets import load_digits

out = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parents[1] / "src/qheqnn/datasets/digits01.csv")
d = load_digits()
keep = d.target <= 1
with open(out, "w", newline="") as fh:
    w = csv.writer(fh)
    w.writerow(["label"] + [f"f{i}" for i in range(64)])
    for x, y in zip(d.data[keep], d.target[keep]):
        w.writerow([int(y)] + [int(v) for v in x])
print(out, int(keep.sum()), "rows")

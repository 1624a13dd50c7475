"""Summarise a training loss CSV as text: first/last/min of each column and a coarse sparkline."""
import argparse
import csv

BARS = " .:-=+*#%@"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("csv_path")
    ap.add_argument("--column", default="total")
    ap.add_argument("--width", type=int, default=60)
    args = ap.parse_args()

    with open(args.csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for name in rows[0]:
        if name == "step":
            continue
        vals = [float(r[name]) for r in rows]
        print(f"{name:>10s} first {vals[0]:.5f} last {vals[-1]:.5f} min {min(vals):.5f}")
    vals = [float(r[args.column]) for r in rows]
    bucket = max(1, len(vals) // args.width)
    means = [sum(vals[i:i + bucket]) / len(vals[i:i + bucket]) for i in range(0, len(vals), bucket)]
    lo, hi = min(means), max(means)
    span = (hi - lo) or 1.0
    print(args.column, "".join(BARS[int((m - lo) / span * (len(BARS) - 1))] for m in means))


if __name__ == "__main__":
    main()

"""Run all three ablation axes on one config and write one CSV per axis.

    python scripts/ablations.py --config configs/desk.cfg --out-dir ablations/
"""

import argparse
from pathlib import Path

from addgcn.config import load_config
from addgcn.train import ABLATION_AXES, ablate, load_datasets


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.cfg")
    ap.add_argument("--axes", nargs="+", default=list(ABLATION_AXES), choices=ABLATION_AXES)
    ap.add_argument("--out-dir", default="ablations")
    args = ap.parse_args()

    base = load_config(args.config).replace(eval_every=1000)
    data = load_datasets(base)  # shared by every variant
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for axis in args.axes:
        rows = ablate(base, axis, out / f"{axis}.csv", *data)
        print(f"== {axis}")
        for r in rows:
            print(f"  {r['variant']:>14}  mAP {r['mAP']:.4f}  OF1 {r['OF1']:.4f}  loss {r['loss']:.4f}")


if __name__ == "__main__":
    main()

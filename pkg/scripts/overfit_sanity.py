"""Memorisation check: tiny SwinS_TB_Skip and SwinS, 200 steps on 8 synthetic 224x224 images."""
import argparse
import json
import tempfile
from pathlib import Path

from microseg.data import synth_generate
from microseg.train import overfit_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--variants", default="SwinS_TB_Skip,SwinS")
    ap.add_argument("--out", help="work directory (default: a temporary one)")
    args = ap.parse_args()
    root = Path(args.out or tempfile.mkdtemp(prefix="overfit_"))
    data = synth_generate(root / "data", 8, 224, seed=0)
    for name in args.variants.split(","):
        print(json.dumps(overfit_run(name, data, root / name, steps=args.steps)))


if __name__ == "__main__":
    main()

"""Print parameter and FLOP counts for every variant at 3x224x224 (meta device, no weights allocated)."""
import argparse

from microseg.train import cmd_profile, profile_table
from microseg.zoo import VARIANTS


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scale", choices=("paper", "tiny"), default="paper")
    ap.add_argument("--side", type=int, default=224)
    ap.add_argument("--out", help="also write profile.json / profile.txt here")
    args = ap.parse_args()
    print(profile_table(cmd_profile(VARIANTS, (3, args.side, args.side), args.out, args.scale)))


if __name__ == "__main__":
    main()

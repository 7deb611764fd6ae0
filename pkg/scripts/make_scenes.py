"""Write procedural clean scenes to feed ``mspfn synth`` when no photos are at hand.

    python3 scripts/make_scenes.py --out scenes --count 8 --size 64
"""

import argparse
from pathlib import Path

from mspfn.data import procedural_scene, save_image


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--count", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--first-seed", type=int, default=100)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        save_image(procedural_scene(args.first_seed + i, args.size, args.size), out / f"scene_{i:02d}.png")
    print(f"wrote {args.count} scenes to {out}")


if __name__ == "__main__":
    main()

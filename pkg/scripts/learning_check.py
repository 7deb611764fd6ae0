"""Train the tiny network on 8 synthetic pairs and report the PSNR gain.

    python3 scripts/learning_check.py --steps 2000 --json result.json
"""

import argparse
import json
import time

from mspfn.bench import learning_check


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--pairs", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--every", type=int, default=100, help="print a progress line every N steps")
    ap.add_argument("--json", help="write the summary here")
    args = ap.parse_args()

    t0 = time.perf_counter()

    def progress(rec):
        if rec["step"] % args.every == 0:
            print(f"step {rec['step']:5d}  loss {rec['loss']:.5f}  psnr {rec['psnr']:.2f}  {time.perf_counter() - t0:6.1f}s",
                  flush=True)

    rep = learning_check(args.steps, args.pairs, seed=args.seed, on_record=progress)
    summary = {
        "steps": args.steps,
        "baseline_psnr": rep.baseline_psnr,
        "derained_psnr": rep.derained_psnr,
        "gain_db": rep.gain_db,
        "block_means": rep.block_means,
        "blocks_decreasing": rep.blocks_decreasing,
        "seconds": rep.seconds,
    }
    print(json.dumps(summary, indent=2))
    if args.json:
        with open(args.json, "w") as f:
            json.dump(summary, f, indent=2)


if __name__ == "__main__":
    main()

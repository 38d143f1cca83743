"""Run synth -> ingest -> train -> evaluate end to end in one directory.

    python scripts/run_pipeline.py --out runs/demo --patients 200 --steps 20000
"""

import argparse
import sys
from pathlib import Path

from morphine_rl import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--patients", type=int, default=200)
    ap.add_argument("--hours", type=int, default=72)
    ap.add_argument("--steps", type=int, default=20_000)
    ap.add_argument("--sim-validate", type=int, default=50)
    ap.add_argument("--simulate", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    out, seed = args.out, str(args.seed)
    stages = [
        ["synth", "--patients", args.patients, "--hours", args.hours, "--jobs", args.jobs,
         "--seed", seed, "--out", out / "cohort"],
        ["ingest", "--input", out / "cohort", "--out", out / "episodes"],
        ["train", "--episodes", out / "episodes", "--steps", args.steps, "--sim-validate", args.sim_validate,
         "--seed", seed, "--out", out / "model"],
        ["evaluate", "--checkpoint", out / "model" / "model.ckpt", "--episodes", out / "episodes",
         "--split", "test", "--simulate", args.simulate, "--seed", str(args.seed + 1000), "--out", out / "report"],
    ]
    for argv in stages:
        print(f"== {argv[0]}", flush=True)
        code = cli.main([str(a) for a in argv])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())

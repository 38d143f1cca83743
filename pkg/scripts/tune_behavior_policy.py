"""Sweep the rule-based clinician's knobs and report the logged bolus rate.

The behavior policy should dose in a minority of hours (target band 2-20%)
while still exploring every action bin often enough for offline learning.
"""

import argparse
import itertools

import numpy as np

from morphine_rl import cohort_synth, mdp


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--patients", type=int, default=100)
    ap.add_argument("--hours", type=int, default=72)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--threshold", type=float, nargs="+", default=[5.0, 6.0, 7.0])
    ap.add_argument("--withhold", type=float, nargs="+", default=[0.3, 0.5, 0.7])
    ap.add_argument("--explore", type=float, nargs="+", default=[0.03, 0.1])
    args = ap.parse_args()

    print("threshold withhold explore  dose_rate  min_actions_per_bin")
    for thr, wh, ex in itertools.product(args.threshold, args.withhold, args.explore):
        pol = cohort_synth.ClinicianPolicy(threshold=thr, withhold_prob=wh, explore_prob=ex)
        cohort = cohort_synth.generate_cohort(args.patients, args.hours, pol, args.seed)
        actions = [mdp.discretize_dose(r.morphine_mg) for ep in cohort for r in ep.truth.records[:-1]]
        per_bin = np.bincount(actions, minlength=mdp.N_ACTIONS)
        rate = cohort_synth.dose_rate(cohort)
        flag = "" if 0.02 <= rate <= 0.20 else "  (outside 2-20%)"
        print(f"{thr:9.1f} {wh:8.2f} {ex:7.2f}  {rate:9.3f}  {per_bin.min():19d}{flag}")


if __name__ == "__main__":
    main()

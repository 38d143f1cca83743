"""Trained policy vs always-withhold vs uniform-random in the simulator.

Trains on a synthetic cohort (simulator-based checkpoint selection), then
rolls all three policies through the same seeded evaluation patients and
prints mean reward per policy. Repeat over several seeds to see the spread:

    python scripts/policy_improvement.py --seeds 7 8 9
"""

import argparse
import time

import numpy as np

from morphine_rl import cohort_synth, evaluation, ingestion, mdp, trainer


def run(seed: int, args) -> dict[str, float]:
    cohort = cohort_synth.generate_cohort(args.patients, args.hours, "clinician", seed, jobs=args.jobs)
    events = {ep.admission_id: ep.events for ep in cohort}
    episodes = ingestion.ingest_events(events)
    train_eps, val_eps, _ = ingestion.split_cohort(episodes, seed=seed)
    ts = mdp.TransitionSet.from_transitions(mdp.cohort_to_transitions(train_eps).transitions)
    vs = mdp.TransitionSet.from_transitions(mdp.cohort_to_transitions(val_eps).transitions)

    def simulator(params, norm):
        return evaluation.simulate_policy(params, n_episodes=args.select_episodes, horizon=args.hours,
                                          seed=seed + 1, normalizer=norm).mean_reward[0]

    cfg = trainer.TrainConfig(total_steps=args.steps, seed=seed, eval_interval=args.eval_interval)
    res = trainer.train(ts, cfg, validation=vs, simulator=simulator)
    out = {"behavior_dose_rate": cohort_synth.dose_rate(cohort), "best_step": res.best_step}
    for name, pol in (("model", res.best), ("withhold", "withhold"), ("random", "random")):
        s = evaluation.simulate_policy(pol, n_episodes=args.eval_episodes, horizon=args.hours,
                                       seed=args.eval_seed, normalizer=res.normalizer)
        out[name] = s.mean_reward[0]
        if name == "model":
            out["model_dose_rate"] = s.dose_rate
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[7])
    ap.add_argument("--patients", type=int, default=500)
    ap.add_argument("--hours", type=int, default=72)
    ap.add_argument("--steps", type=int, default=60_000)
    ap.add_argument("--eval-interval", type=int, default=5000)
    ap.add_argument("--select-episodes", type=int, default=50)
    ap.add_argument("--eval-episodes", type=int, default=200)
    ap.add_argument("--eval-seed", type=int, default=1000)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    print("seed  model   withhold random  margin  best_step  dose(beh/model)  secs")
    margins = []
    for seed in args.seeds:
        t0 = time.perf_counter()
        r = run(seed, args)
        margin = r["model"] - max(r["withhold"], r["random"])
        margins.append(margin)
        print(f"{seed:>4}  {r['model']:.4f}  {r['withhold']:.4f}  {r['random']:.4f}  {margin:+.4f}  "
              f"{r['best_step']:>9}  {r['behavior_dose_rate']:.3f}/{r['model_dose_rate']:.3f}  "
              f"{time.perf_counter() - t0:5.0f}", flush=True)
    if len(margins) > 1:
        print(f"margin mean {np.mean(margins):+.4f}  min {np.min(margins):+.4f}")


if __name__ == "__main__":
    main()

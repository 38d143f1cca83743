"""``morphine-rl``: synthesize, ingest, train, evaluate, recommend.

Settings come from ``--config`` (flat ``key = value`` file), then
``MORPHINE_RL_<KEY>`` environment variables, then command-line flags.
Every command writes ``manifest.json`` next to its outputs.

Exit codes: 0 success, 2 usage or config error, 3 missing upstream
artifact, 4 numerical failure (training diverged).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import struct
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from morphine_rl import __version__, cohort_synth, evaluation, ingestion, mdp, qnet, trainer
from morphine_rl.config import ConfigError, load_config, require

log = logging.getLogger("morphine_rl")

MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA = 1

# validation TD error alone tends to favour the untrained network, so
# checkpoints are chosen by simulated return unless --sim-validate 0
DEFAULT_SIM_VALIDATE = 50

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class MissingArtifact(FileNotFoundError):
    pass


# -- helpers ----------------------------------------------------------------


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the timestamp for reproducible manifests
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return when.isoformat(timespec="seconds")


def write_manifest(out_dir: Path, command: str, args, inputs: list[Path], outputs: list[Path]) -> Path:
    """Record what was run, on what, and what it produced (with hashes)."""
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "command": command,
        "config_path": str(args.config) if args.config else None,
        "seed": args.seed,
        "inputs": [str(p) for p in inputs],
        "outputs": {p.name: sha256(p) for p in sorted(outputs)},
        "tool_version": __version__,
        "timestamp": _timestamp(),
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _settings(args) -> dict:
    if args.config and not Path(args.config).is_file():
        raise MissingArtifact(f"config file not found: {args.config}")
    return load_config(args.config)


def _pick(flag, cfg: dict, key: str, cast=str, default=None):
    """Flag value if given, else config/env, else ``default``; ``require`` if no default."""
    if flag is not None:
        return flag
    if key in cfg and cfg[key] != "":
        return require(cfg, key, cast)
    if default is None:
        return require(cfg, key, cast)
    return default


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _existing(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"missing config key: {what}")
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"{what} not found: {path}")
    return path


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, sort_keys=True) if args.json else text)


# -- commands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _settings(args)
    n = _pick(args.patients, cfg, "n_patients", int)
    hours = _pick(args.hours, cfg, "horizon_hours", int)
    policy = _pick(args.policy, cfg, "behavior_policy", str, "clinician")
    try:
        dist = cohort_synth.PatientDistribution.from_mapping(cfg)
        cohort = cohort_synth.generate_cohort(n, hours, policy, args.seed, dist, jobs=args.jobs)
    except (cohort_synth.ConfigurationError, cohort_synth.InvalidParameterError) as exc:
        raise ConfigError(str(exc)) from None

    out = _out_dir(args)
    outputs = []
    for ep in cohort:
        path = out / f"{ep.admission_id}.events.csv"
        path.write_text(ingestion.format_events(ep.events))
        outputs.append(path)
    patients = out / "patients.jsonl"
    patients.write_text("".join(
        json.dumps({"admission_id": ep.admission_id, **cohort_synth.params_dict(ep.params)}, sort_keys=True) + "\n"
        for ep in cohort
    ))
    outputs.append(patients)
    write_manifest(out, "synth", args, [], outputs)
    rate = cohort_synth.dose_rate(cohort)
    _emit(args, {"patients": n, "hours": hours, "dose_rate": rate, "out": str(out)},
          f"wrote {n} patients x {hours} h to {out} (bolus rate {rate:.1%})")
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _settings(args)
    src = _existing(_pick(args.input, cfg, "input", str, ""), "input") if (args.input or cfg.get("input")) \
        else _existing(None, "input")
    drugs = ingestion.load_coanalgesics(cfg["coanalgesic_list"]) if cfg.get("coanalgesic_list") \
        else ingestion.COANALGESICS

    if cfg.get("impute_defaults", "").lower() == "cohort":
        defaults = "cohort"
    else:
        defaults = {k: float(cfg.get(f"impute_{k}", v)) for k, v in ingestion.DEFAULT_IMPUTE.items()}

    stats = ingestion.IngestStats()
    try:
        events = ingestion.read_events_path(src, stats)
    except ingestion.FormatError as exc:
        raise ConfigError(f"{src}: {exc}") from None
    episodes = ingestion.ingest_events(events, defaults, stats, drugs)

    out = _out_dir(args)
    outputs = []
    for ep in episodes:
        path = out / ingestion.episode_filename(ep.admission_id)
        path.write_text(ingestion.format_episode(ep, drugs))
        outputs.append(path)
    stats_path = out / "ingest_stats.json"
    stats_path.write_text(json.dumps(
        {"events_read": stats.events_read, "dropped": dict(sorted(stats.dropped.items())),
         "episodes": len(episodes), "hours": sum(len(ep.records) for ep in episodes)},
        indent=2, sort_keys=True) + "\n")
    outputs.append(stats_path)
    write_manifest(out, "ingest", args, [src], outputs)
    _emit(args, {"episodes": len(episodes), "events_read": stats.events_read, "dropped": stats.n_dropped},
          f"ingested {len(episodes)} episodes ({stats.events_read} events, {stats.n_dropped} dropped) into {out}")
    return EXIT_OK


def _load_episodes(path) -> list[ingestion.EpisodeLog]:
    episodes = ingestion.read_episode_dir(path)
    if not episodes:
        raise MissingArtifact(f"no *.episode.csv files in {path}")
    return episodes


def cmd_train(args) -> int:
    cfg = _settings(args)
    ep_dir = _existing(_pick(args.episodes, cfg, "episodes", str, "") or None, "episodes")
    episodes = _load_episodes(ep_dir)
    cfg = dict(cfg)
    if args.steps is not None:
        cfg["total_steps"] = str(args.steps)
    cfg["seed"] = str(args.seed)
    try:
        config = trainer.TrainConfig.from_mapping({k: v for k, v in cfg.items() if k != "checkpoint_dir"})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    sim_episodes = _pick(args.sim_validate, cfg, "sim_validate", int, DEFAULT_SIM_VALIDATE)

    try:
        train_eps, val_eps, test_eps = ingestion.split_cohort(episodes, seed=args.seed)
    except ingestion.InsufficientDataError as exc:
        raise MissingArtifact(str(exc)) from None
    sets = {}
    for name, eps in (("train", train_eps), ("val", val_eps), ("test", test_eps)):
        conv = mdp.cohort_to_transitions(eps)
        sets[name] = mdp.TransitionSet.from_transitions(conv.transitions) if conv.transitions else None
    if sets["train"] is None:
        raise MissingArtifact(f"training split of {ep_dir} has no transitions")

    simulator = None
    if sim_episodes > 0:
        dist = cohort_synth.PatientDistribution.from_mapping(cfg)
        horizon = int(cfg.get("horizon_hours", 72))

        def simulator(params, norm):
            return evaluation.simulate_policy(params, dist, sim_episodes, horizon, args.seed + 1,
                                              config.gamma, norm).mean_reward[0]

    out = _out_dir(args)
    try:
        result = trainer.train(sets["train"], config, validation=sets["val"], simulator=simulator)
    except trainer.TrainingDiverged as exc:
        path = out / "last_good.ckpt"
        qnet.save_checkpoint(path, exc.last_good, None, {"diverged_at": exc.step})
        log.error("training diverged at step %d; last good parameters in %s", exc.step, path)
        return EXIT_NUMERIC

    outputs = []
    ckpt = out / "model.ckpt"
    meta = {**result.checkpoint_meta(), "selection": "simulator" if simulator else "validation_td",
            "n_train": len(sets["train"])}
    qnet.save_checkpoint(ckpt, result.best, result.normalizer, meta)
    outputs.append(ckpt)
    train_log = out / "train_log.csv"
    train_log.write_text(result.log_csv())
    outputs.append(train_log)
    split = out / "split.json"
    split.write_text(json.dumps({
        name: [ep.admission_id for ep in eps]
        for name, eps in (("train", train_eps), ("val", val_eps), ("test", test_eps))
    }, indent=2) + "\n")
    outputs.append(split)
    for name, ts in sets.items():
        if ts is not None:
            path = out / f"transitions_{name}.csv"
            mdp.save_transitions(path, ts, result.normalizer)
            outputs.append(path)
    write_manifest(out, "train", args, [ep_dir], outputs)
    _emit(args, {"checkpoint": str(ckpt), "best_step": result.best_step, "best_metric": result.best_metric,
                 "steps": config.total_steps, "n_train": len(sets["train"])},
          f"trained {config.total_steps} steps on {len(sets['train'])} transitions; "
          f"kept step {result.best_step} -> {ckpt}")
    return EXIT_OK


def _load_checkpoint(path) -> qnet.Checkpoint:
    path = _existing(path, "checkpoint")
    try:
        return qnet.load_checkpoint(path)
    except (ValueError, KeyError, struct.error) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def cmd_evaluate(args) -> int:
    cfg = _settings(args)
    ckpt_path = _pick(args.checkpoint, cfg, "checkpoint", str, "") or None
    ck = _load_checkpoint(ckpt_path)
    fmt = _pick(args.format, cfg, "report_format", str, "csv")
    if fmt not in ("csv", "jsonl"):
        raise ConfigError(f"report format must be csv or jsonl, got {fmt!r}")
    n_sim = _pick(args.simulate, cfg, "simulate_episodes", int, 0)
    out = _out_dir(args)
    inputs, outputs, summary = [Path(ckpt_path)], [], {}

    ep_dir = _pick(args.episodes, cfg, "episodes", str, "") or None
    if ep_dir is not None:
        ep_dir = _existing(ep_dir, "episodes")
        episodes = _load_episodes(ep_dir)
        inputs.append(ep_dir)
        if args.split != "all":
            split_file = _existing(args.split_file or Path(ckpt_path).parent / "split.json", "split file")
            keep = set(json.loads(split_file.read_text())[args.split])
            episodes = [ep for ep in episodes if ep.admission_id in keep]
            inputs.append(split_file)
        try:
            report = evaluation.compare_policies(ck.params, episodes, ck.normalizer)
        except ValueError as exc:
            raise MissingArtifact(f"no decision hours to evaluate: {exc}") from None
        outputs += evaluation.export_report(report, out, fmt)
        summary["report"] = report.summary()

    if n_sim > 0:
        dist = cohort_synth.PatientDistribution.from_mapping(cfg)
        horizon = int(cfg.get("horizon_hours", 72))
        gamma = float(cfg.get("gamma", 0.99))
        sims = {
            name: evaluation.simulate_policy(pol, dist, n_sim, horizon, args.seed, gamma, ck.normalizer).to_dict()
            for name, pol in (("model", ck.params), ("withhold", "withhold"), ("random", "random"))
        }
        path = out / "sim_stats.json"
        path.write_text(json.dumps(sims, indent=2, sort_keys=True) + "\n")
        outputs.append(path)
        summary["simulation"] = {k: v["mean_reward"][0] for k, v in sims.items()}

    if not outputs:
        raise ConfigError("nothing to evaluate: give --episodes and/or --simulate N")
    write_manifest(out, "evaluate", args, inputs, outputs)
    lines = [f"wrote {len(outputs)} files to {out}"]
    if "report" in summary:
        r = summary["report"]
        lines.append(f"physician rate {r['physician_rate']:.3f}  model rate {r['model_rate']:.3f}")
    for name, v in summary.get("simulation", {}).items():
        lines.append(f"simulated mean reward {name:>8}: {v:.4f}")
    _emit(args, summary, "\n".join(lines))
    return EXIT_OK


def _parse_state(text: str) -> np.ndarray:
    try:
        values = [float(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"--state must be comma-separated numbers, got {text!r}") from None
    if len(values) != mdp.STATE_DIM:
        raise ConfigError(f"--state needs {mdp.STATE_DIM} values (pain, hr, rr, 16 co-analgesics), got {len(values)}")
    return np.array(values)


def format_recommendation(action: int, q: np.ndarray) -> str:
    lines = [f"recommended action {action}: {mdp.action_label(action)}", "", "action  dose          q_value"]
    for a, v in enumerate(q):
        mark = " *" if a == action else ""
        lines.append(f"{a:>6}  {mdp.action_label(a):<12}  {v: .6f}{mark}")
    return "\n".join(lines)


def cmd_recommend(args) -> int:
    cfg = _settings(args)
    ck = _load_checkpoint(_pick(args.checkpoint, cfg, "checkpoint", str, "") or None)
    state = _parse_state(args.state)
    if ck.params.arch.n_inputs != mdp.STATE_DIM:
        raise ConfigError(f"checkpoint expects {ck.params.arch.n_inputs} inputs, state has {mdp.STATE_DIM}")
    x = ck.normalizer(state) if ck.normalizer is not None else state
    q = np.atleast_2d(qnet.forward(ck.params, x).q_values)[0]
    action = evaluation.greedy_action(ck.params, state, ck.normalizer)
    payload = {"action": action, "label": mdp.action_label(action), "q_values": [float(v) for v in q]}
    _emit(args, payload, format_recommendation(action, q))
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1, help="worker processes where supported")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--json", action="store_true", help="machine-readable stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="morphine-rl", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort as event CSVs")
    s.add_argument("--patients", type=int)
    s.add_argument("--hours", type=int)
    s.add_argument("--policy", help="behavior policy: clinician, withhold or random")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", parents=[common], help="event CSVs -> hourly episode files")
    s.add_argument("--input", help="event CSV file or directory of them")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", parents=[common], help="train the dueling double DQN")
    s.add_argument("--episodes", help="directory of *.episode.csv files")
    s.add_argument("--steps", type=int)
    s.add_argument("--sim-validate", type=int, metavar="N",
                   help=f"select checkpoints by simulated return over N episodes (default {DEFAULT_SIM_VALIDATE}; 0 uses validation TD error)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="compare against clinicians and simulate")
    s.add_argument("--checkpoint")
    s.add_argument("--episodes", help="directory of *.episode.csv files")
    s.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    s.add_argument("--split-file", help="split.json (default: next to the checkpoint)")
    s.add_argument("--format", choices=("csv", "jsonl"))
    s.add_argument("--simulate", type=int, metavar="N", help="simulated episodes per policy")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("recommend", parents=[common], help="greedy dose for one state")
    s.add_argument("--checkpoint")
    s.add_argument("--state", required=True, help=f"{mdp.STATE_DIM} comma-separated values")
    s.set_defaults(func=cmd_recommend)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("morphine-rl: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except MissingArtifact as exc:
        print(f"morphine-rl: error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"morphine-rl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except qnet.NumericalError as exc:
        print(f"morphine-rl: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

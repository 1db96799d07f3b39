"""Command-line entry point (``wncs-lab`` / ``python -m wncs_lab``)."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness as hs
from . import markov_learner as ml
from .smpc import CONTROLLERS

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _config(args) -> hs.ExperimentConfig:
    cfg = hs.ExperimentConfig.load(args.config) if args.config else hs.ExperimentConfig()
    run, corpus = cfg.run, cfg.corpus
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.command == "gen-traces":
        if args.runs is not None:
            corpus = dataclasses.replace(corpus, n_traces=args.runs)
        if args.steps is not None:
            corpus = dataclasses.replace(corpus, n_steps=args.steps)
    else:
        if args.runs is not None:
            run = dataclasses.replace(run, n_runs=args.runs)
        if args.steps is not None:
            run = dataclasses.replace(run, n_steps=args.steps)
    if args.controller is not None:
        run = dataclasses.replace(run, controllers=[args.controller])
    return dataclasses.replace(cfg, run=run, corpus=corpus)


def _write_config(cfg, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())


def cmd_gen_traces(cfg, out: Path):
    _write_config(cfg, out)
    traces, _ = hs.generate_corpus(cfg, out)
    print(f"wrote {len(traces)} traces to {out / 'traces'}")


def cmd_identify_plant(cfg, out: Path):
    traces = hs.load_traces(out / "traces")
    _, excitation = hs.bootstrap_sarx(cfg)
    model = hs.identify_plant(cfg, excitation + [(t["y"], t["u"]) for t in traces])
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "models" / "sarx.json").write_text(model.to_json())
    print(f"SARX model with horizon {model.horizon} written to {out / 'models' / 'sarx.json'}")


def cmd_learn_channel(cfg, out: Path):
    model = hs.learn_channel(cfg, hs.load_traces(out / "traces"))
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "models" / "learned_channel.json").write_text(model.to_json())
    print(f"learned channel model with {model.n_states} states written")


def cmd_fsmc_baseline(cfg, out: Path):
    model = hs.fsmc_baseline(cfg)
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "models" / "fsmc.json").write_text(model.to_json())
    print(f"FSMC baseline with {model.n_states} states written")


def cmd_simulate(cfg, out: Path):
    mdir = out / "models"
    needed = ["sarx.json"]
    if "learned" in cfg.run.controllers:
        needed.append("learned_channel.json")
    if "fsmc" in cfg.run.controllers:
        needed.append("fsmc.json")
    models = hs.Models.load(mdir) if all((mdir / n).exists() for n in needed) else None
    res = hs.run_experiment(cfg, out, models=models)
    _print_summary(res.summary)


def cmd_evaluate(cfg, out: Path):
    model = ml.LearnedChannelModel.from_json((out / "models" / "learned_channel.json").read_text())
    n = max(1, cfg.corpus.n_traces // 5)
    held, _ = hs.generate_corpus(cfg, None, purpose=hs.HELD_OUT, n_traces=n)
    report = hs.evaluate_channel_model(model, hs.sinr_traces(held))
    report["config_fingerprint"] = cfg.fingerprint()
    (out / "evaluation.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"calibration error {report['calibration']['mean_abs_error']:.4f}, "
          f"log-likelihood/sample {report['log_likelihood']['per_sample']:.4f}")


def _print_summary(summary):
    sc = summary["scale"]
    print(f"{sc['n_runs']} runs x {sc['n_steps']} steps (reference study: {sc['reference_runs']} runs)")
    print(f"{'controller':<14}{'settled':>9}{'mean cost':>16}{'95.4% band':>30}{'PER':>9}")
    for kind, e in summary["controllers"].items():
        c = e.get("cumulative_cost", {})
        bandtxt = f"[{c.get('lo', float('nan')):.1f}, {c.get('hi', float('nan')):.1f}]"
        print(f"{kind:<14}{e['settled_fraction']:>9.2f}{c.get('mean', float('nan')):>16.1f}"
              f"{bandtxt:>30}{e.get('per', {}).get('mean', float('nan')):>9.3f}")


def cmd_report(cfg, out: Path):
    path = out / "summary.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run 'simulate' first")
    _print_summary(json.loads(path.read_text()))


COMMANDS = {
    "gen-traces": cmd_gen_traces,
    "identify-plant": cmd_identify_plant,
    "learn-channel": cmd_learn_channel,
    "fsmc-baseline": cmd_fsmc_baseline,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wncs-lab",
                                description="Learned wireless channel models for stochastic MPC.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON); defaults apply if omitted")
    common.add_argument("--seed", type=int, help="base seed (overrides the config)")
    common.add_argument("--runs", type=int, help="Monte Carlo runs (corpus traces for gen-traces)")
    common.add_argument("--steps", type=int, help="steps per run (per trace for gen-traces)")
    common.add_argument("--controller", choices=CONTROLLERS, help="restrict to one controller variant")
    common.add_argument("--out", default="results", help="experiment directory (default: results)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except (hs.ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](cfg, Path(args.out))
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        logging.getLogger("wncs_lab").debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

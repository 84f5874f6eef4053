"""Command-line entry point.

Subcommands: gen-data, train, eval, render, grad-check. Every subcommand
reads an optional flat YAML config (``--config``); flags override file
values, and the resolved config is written to ``config.yaml`` next to the
outputs. Without ``--out``, outputs go to ``$MOE_PLANNER_OUT/<subcommand>``
(default root ``runs``).

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
OUT_ENV = "MOE_PLANNER_OUT"
DPE_FLAGS = {"off": "none", "agent": "agent_only", "map": "map_only", "agent_map": "agent_map"}

log = logging.getLogger("moe_planner")

DEFAULTS: dict[str, dict] = {
    "gen-data": {
        "num": 100, "seed": 1, "topologies": "straight,curved,intersection,lane_change",
        "agents_min": 2, "agents_max": 10, "speed_min": 6.0, "speed_max": 14.0, "out": None,
    },
    "train": {
        "corpus": None, "steps": 500, "batch_size": 8, "lr": 1e-3, "seed": 0, "dpe": "agent_map",
        "experts": 16, "topk": 2, "shared": 2, "router": True, "balance": True, "d_model": 64,
        "heads": 4, "modes": 6, "schedule": "cosine", "w_plan": 1.0, "w_disp": 1.0, "w_bal": 1.0, "out": None,
    },
    "eval": {
        "corpus": None, "checkpoint": None, "planner": "learned", "mode": "all", "horizon": 8.0,
        "traces": False, "out": None,
    },
    "render": {
        "corpus": None, "index": 0, "trace": None, "checkpoint": None, "histograms": None, "out": None,
    },
    "grad-check": {"seed": 0, "epsilon": 1e-5, "tolerance": 1e-4, "out": None},
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="moe-planner", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    S = argparse.SUPPRESS

    g = sub.add_parser("gen-data", help="generate a scenario corpus")
    g.add_argument("--config")
    g.add_argument("--num", type=int, default=S)
    g.add_argument("--seed", type=int, default=S)
    g.add_argument("--topologies", default=S, help="comma-separated topology list")
    g.add_argument("--agents-min", dest="agents_min", type=int, default=S)
    g.add_argument("--agents-max", dest="agents_max", type=int, default=S)
    g.add_argument("--speed-min", dest="speed_min", type=float, default=S)
    g.add_argument("--speed-max", dest="speed_max", type=float, default=S)
    g.add_argument("--out", default=S)

    t = sub.add_parser("train", help="train a planner")
    t.add_argument("--config")
    t.add_argument("--corpus", default=S)
    t.add_argument("--steps", type=int, default=S)
    t.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    t.add_argument("--lr", type=float, default=S)
    t.add_argument("--seed", type=int, default=S)
    t.add_argument("--dpe", choices=sorted(DPE_FLAGS), default=S)
    t.add_argument("--experts", type=int, default=S, help="routed experts per layer; 0 = plain decoder")
    t.add_argument("--topk", type=int, default=S)
    t.add_argument("--shared", type=int, choices=[0, 2], default=S)
    t.add_argument("--router", action=argparse.BooleanOptionalAction, default=S,
                   help="attention in the router (--no-router: MLP on the query only)")
    t.add_argument("--balance", action=argparse.BooleanOptionalAction, default=S)
    t.add_argument("--d-model", dest="d_model", type=int, default=S)
    t.add_argument("--heads", type=int, default=S)
    t.add_argument("--modes", type=int, default=S)
    t.add_argument("--schedule", choices=["cosine", "constant"], default=S)
    t.add_argument("--w-plan", dest="w_plan", type=float, default=S)
    t.add_argument("--w-disp", dest="w_disp", type=float, default=S)
    t.add_argument("--w-bal", dest="w_bal", type=float, default=S)
    t.add_argument("--out", default=S)

    e = sub.add_parser("eval", help="open-loop and closed-loop evaluation")
    e.add_argument("--config")
    e.add_argument("--corpus", default=S)
    e.add_argument("--checkpoint", default=S)
    e.add_argument("--planner", choices=["learned", "log_replay"], default=S)
    e.add_argument("--mode", choices=["open", "NR", "R", "all"], default=S)
    e.add_argument("--horizon", type=float, default=S, help="closed-loop horizon in seconds")
    e.add_argument("--traces", action=argparse.BooleanOptionalAction, default=S)
    e.add_argument("--out", default=S)

    r = sub.add_parser("render", help="render a scenario or rollout to SVG")
    r.add_argument("--config")
    r.add_argument("--corpus", default=S)
    r.add_argument("--index", type=int, default=S)
    r.add_argument("--trace", default=S, help="JSON Lines trace of a single rollout")
    r.add_argument("--checkpoint", default=S, help="draw this model's plan for the scenario")
    r.add_argument("--histograms", default=S, help="expert histogram JSON from training")
    r.add_argument("--out", default=S)

    c = sub.add_parser("grad-check", help="finite-difference check of the training loss")
    c.add_argument("--config")
    c.add_argument("--seed", type=int, default=S)
    c.add_argument("--epsilon", type=float, default=S)
    c.add_argument("--tolerance", type=float, default=S)
    c.add_argument("--out", default=S)
    return p


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise DataError(f"config file is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError("config file must be a flat key-value mapping")
        data = {k.replace("-", "_"): v for k, v in data.items()}
        unknown = sorted(set(data) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(data)
    for k, v in vars(args).items():
        if k in cfg:
            cfg[k] = v
    if cfg.get("out") is None:
        cfg["out"] = str(Path(os.environ.get(OUT_ENV, "runs")) / command)
    return cfg


def _write_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _write_csv(path: Path, rows: list[dict], fields) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def _load_corpus(path):
    from .scene.io import ScenarioFormatError, read_corpus

    if path is None:
        raise UsageError("--corpus is required")
    try:
        return read_corpus(path)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    except ScenarioFormatError as exc:
        raise DataError(str(exc)) from exc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: dict) -> int:
    from .scene.generator import TOPOLOGIES, GenerationError, GeneratorConfig, generate_scenario
    from .scene.io import write_corpus

    topos = cfg["topologies"]
    topos = [t.strip() for t in (topos.split(",") if isinstance(topos, str) else topos) if t.strip()]
    bad = [t for t in topos if t not in TOPOLOGIES]
    if bad or not topos:
        raise UsageError(f"unknown topologies {bad}; choose from {', '.join(TOPOLOGIES)}")
    if cfg["num"] < 0:
        raise UsageError("--num must be non-negative")
    out = Path(cfg["out"])
    _write_config(out, cfg)
    records, scenarios = [], []
    try:
        for i in range(cfg["num"]):
            topo = topos[i % len(topos)]
            seed = int(cfg["seed"]) + i
            gc = GeneratorConfig(
                topology=topo, num_agents=(cfg["agents_min"], cfg["agents_max"]),
                speed_range=(cfg["speed_min"], cfg["speed_max"]),
            )
            s = generate_scenario(gc, seed)
            scenarios.append(s)
            records.append({"index": i, "seed": seed, "topology": topo, "num_agents": s.num_agents,
                            "num_polylines": len(s.map_polylines)})
    except GenerationError as exc:
        raise DataError(f"infeasible generator config: {exc}") from exc
    write_corpus(out / "corpus.jsonl", scenarios)
    _write_csv(out / "manifest.csv", records, ["index", "seed", "topology", "num_agents", "num_polylines"])
    print(f"wrote {len(scenarios)} scenarios to {out / 'corpus.jsonl'}")
    return EXIT_OK


def _train_config(cfg: dict, future_steps: int):
    from .model import ModelConfig
    from .training import TrainConfig

    model = ModelConfig(
        d_model=cfg["d_model"], num_heads=cfg["heads"], ffn_hidden=4 * cfg["d_model"], num_modes=cfg["modes"],
        future_steps=future_steps, num_experts=cfg["experts"], top_k=cfg["topk"], num_shared=cfg["shared"],
        router_attention=bool(cfg["router"]), seed=cfg["seed"],
    )
    return TrainConfig(
        lr=cfg["lr"], batch_size=cfg["batch_size"], steps=cfg["steps"], seed=cfg["seed"], w_plan=cfg["w_plan"],
        w_disp=cfg["w_disp"], w_bal=cfg["w_bal"], dpe_mode=DPE_FLAGS[cfg["dpe"]], balance=bool(cfg["balance"]),
        schedule=cfg["schedule"], model=model,
    )


def cmd_train(cfg: dict) -> int:
    from .decoder import ConfigurationError
    from .training import train

    if cfg["dpe"] not in DPE_FLAGS:
        raise UsageError(f"--dpe must be one of {sorted(DPE_FLAGS)}")
    corpus = _load_corpus(cfg["corpus"])
    if not corpus:
        raise DataError("training corpus is empty")
    try:
        tc = _train_config(cfg, corpus[0].future_steps)
    except (ConfigurationError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    out = Path(cfg["out"])
    _write_config(out, cfg)
    result = train(corpus, tc, out_dir=out)
    last = result.history[-1] if result.history else {}
    print(f"trained {tc.steps} steps; final " + " ".join(f"{k}={v:.4f}" for k, v in last.items() if k != "step"))
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    from .features import scenario_snapshot
    from .model import load_model
    from .numerics import CheckpointError
    from .sim.metrics import METRIC_FIELDS, aggregate, score
    from .sim.simulator import LearnedPlanner, LogReplayPlanner, open_loop_plans, rollout_many
    from .training import expert_usage

    corpus = _load_corpus(cfg["corpus"])
    model = None
    if cfg["planner"] == "learned":
        if not cfg["checkpoint"]:
            raise UsageError("--checkpoint is required for the learned planner")
        try:
            model, _ = load_model(cfg["checkpoint"])
        except (FileNotFoundError, CheckpointError) as exc:
            raise DataError(f"cannot load checkpoint: {exc}") from exc
        model.eval()
        if corpus and corpus[0].future_steps != model.config.future_steps:
            raise DataError(
                f"horizon mismatch: checkpoint plans {model.config.future_steps} steps, "
                f"corpus has {corpus[0].future_steps}"
            )
    planner = LearnedPlanner(model) if model is not None else LogReplayPlanner()
    out = Path(cfg["out"])
    _write_config(out, cfg)
    modes = ["open", "NR", "R"] if cfg["mode"] == "all" else [cfg["mode"]]
    rows, summary, traces = [], [], []
    for mode in modes:
        if mode == "open":
            plans = open_loop_plans(planner, corpus)
            err = [np.linalg.norm(p[:, :2] - s.gt_future()[:, :2], axis=1) for p, s in zip(plans, corpus)]
            ade = float(np.mean([e.mean() for e in err])) if err else float("nan")
            fde = float(np.mean([e[-1] for e in err])) if err else float("nan")
            summary.append({"mode": "open", "ade": ade, "fde": fde})
            continue
        trs = rollout_many(planner, corpus, mode, cfg["horizon"]) if corpus else []
        reports = [score(tr, s) for tr, s in zip(trs, corpus)]
        for i, (s, r) in enumerate(zip(corpus, reports)):
            rows.append({"index": i, "seed": s.seed, "topology": s.topology, "mode": mode, **r.row()})
        summary.append({"mode": mode, **aggregate(reports)})
        traces.extend(trs)
    _write_csv(out / "metrics.csv", rows, ["index", "seed", "topology", "mode", *METRIC_FIELDS])
    _write_csv(out / "summary.csv", summary, ["mode", "ade", "fde", *METRIC_FIELDS])
    if cfg["traces"]:
        with open(out / "traces.jsonl", "w") as fh:
            for tr in traces:
                fh.write(tr.to_jsonl())
    if model is not None and model.config.has_experts and corpus:
        counts = expert_usage(model, [scenario_snapshot(s) for s in corpus])
        (out / "expert_usage.json").write_text(json.dumps({"layers": counts.astype(int).tolist()}))
    for row in summary:
        print(" ".join(f"{k}={_fmt(v)}" for k, v in row.items()))
    return EXIT_OK


def cmd_render(cfg: dict) -> int:
    from .features import collate, scenario_snapshot
    from .model import load_model
    from .render import render_scene, render_trace

    corpus = _load_corpus(cfg["corpus"])
    histograms = None
    if cfg["histograms"]:
        try:
            data = json.loads(Path(cfg["histograms"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read histograms: {exc}") from exc
        if isinstance(data, list):  # training log: use the last record
            histograms = data[-1]["layers"] if data else None
        else:
            histograms = data.get("layers")
    out = Path(cfg["out"])
    out_file = out if out.suffix == ".svg" else out / "render.svg"
    out_file.parent.mkdir(parents=True, exist_ok=True)
    _write_config(out_file.parent, cfg)
    if cfg["trace"]:
        try:
            records = [json.loads(line) for line in Path(cfg["trace"]).read_text().splitlines() if line.strip()]
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"malformed trace: {exc}") from exc
        seeds = {r.get("seed") for r in records}
        modes = {r.get("mode") for r in records}
        if len(seeds) != 1 or len(modes) != 1:
            raise DataError("trace file must hold exactly one rollout")
        seed = seeds.pop()
        match = [s for s in corpus if s.seed == seed]
        if not match:
            raise DataError(f"no scenario with seed {seed} in corpus")
        try:
            svg = render_trace(match[0], records, histograms)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    else:
        if not 0 <= cfg["index"] < len(corpus):
            raise DataError(f"scenario index {cfg['index']} out of range ({len(corpus)} scenarios)")
        scn = corpus[cfg["index"]]
        predicted = None
        if cfg["checkpoint"]:
            model, _ = load_model(cfg["checkpoint"])
            out_plan = model.plan(collate([scenario_snapshot(scn, with_targets=False)]))
            predicted = out_plan.best()[0].numpy()
        svg = render_scene(scn, predicted=predicted, histograms=histograms)
    out_file.write_text(svg)
    print(f"wrote {out_file}")
    return EXIT_OK


def cmd_grad_check(cfg: dict) -> int:
    from .gradcheck import run_grad_check

    out = Path(cfg["out"])
    _write_config(out, cfg)
    report, elapsed = run_grad_check(seed=cfg["seed"], epsilon=cfg["epsilon"])
    worst = max(report.values(), default=0.0)
    rows = [{"block": k, "max_rel_err": v} for k, v in report.items()]
    _write_csv(out / "grad_check.csv", rows, ["block", "max_rel_err"])
    for r in rows:
        print(f"{r['block']:60s} {r['max_rel_err']:.3e}")
    ok = worst <= cfg["tolerance"]
    print(f"max relative error {worst:.3e} (tolerance {cfg['tolerance']:.0e}) in {elapsed:.1f}s: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "render": cmd_render,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

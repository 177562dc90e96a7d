"""Command-line pipeline: gen-data, train, evaluate, report."""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import config as cfgmod
from .data_gen import generate_dataset, load_dataset, save_dataset, synth_prices
from .game import GameTrace, MixedPolicy, load_policy, run_game
from .market_sim import PriceSeries, load_prices
from .ope import METHODS, OpeError, OpeEstimate, evaluate_signals, format_report, signal_name
from .rollout import behavior_fn, crp_fn, mixed_fn, simulate


class CliError(RuntimeError):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _resolve_config(args) -> Dict:
    if getattr(args, "config", None):
        cfg = cfgmod.load(args.config)
    else:
        cfg = cfgmod.resolve({})
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
        cfgmod.build(cfg)
    sys.stdout.write(cfgmod.dumps(cfg))
    sys.stdout.flush()
    return cfg


def price_series(cfg: Dict) -> PriceSeries:
    mk = cfg["market"]
    if mk["price_file"]:
        series = load_prices(mk["price_file"])
        if series.n_stocks != mk["n_stocks"]:
            raise CliError(f"[market] n_stocks is {mk['n_stocks']} but {mk['price_file']} "
                           f"has {series.n_stocks} tickers")
        return series
    return synth_prices(mk["n_stocks"], mk["n_days"], mk["price_seed"], mk["drift"], mk["vol"],
                        mk["intraday_vol"])


def cmd_gen_data(cfg: Dict, out_path: Path) -> Path:
    built = cfgmod.build(cfg)
    series = price_series(cfg)
    ds = cfg["dataset"]
    data = generate_dataset(series, built["behavior"], ds["episodes"], ds["horizon"], built["spec"],
                            seed=cfg["seed"], window=cfg["market"]["window"])
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(data, out_path)
    sidecar = out_path.with_name(out_path.name + ".json")
    _write_text(sidecar, json.dumps({"seed": cfg["seed"], "config": cfg}, indent=2, sort_keys=True) + "\n")
    _log(f"wrote {len(data)} transitions to {out_path}")
    return out_path


def cmd_train(cfg: Dict, dataset_path: Path, out_dir: Path) -> MixedPolicy:
    built = cfgmod.build(cfg)
    data = load_dataset(dataset_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_text(out_dir / "resolved_config.toml", cfgmod.dumps(cfg))
    mixed, trace = run_game(data, built["spec"], built["game"], log=_log)
    mixed.save(out_dir / "policy.bin")
    # seconds vary between runs; the trace keeps them zeroed so reruns are byte-identical
    trace.save(out_dir / "trace.csv", include_time=False)
    timing = "t,seconds\n" + "".join(f"{r.t},{r.seconds!r}\n" for r in trace.records)
    _write_text(out_dir / "timing.csv", timing)
    _log(f"{len(trace)} iterations; mixed policy with {len(mixed.components)} components")
    return mixed


def evaluate_mixture(mixed: MixedPolicy, dataset, method: str, gamma: float, fqe_config,
                     bandwidth: float) -> List[OpeEstimate]:
    """Estimates of a mixed policy: the mixture-weighted average of its components' estimates."""
    per_comp = [evaluate_signals(p, dataset, method, gamma, fqe_config, bandwidth)
                for p in mixed.components]
    out = []
    for j in range(len(per_comp[0])):
        ests = [c[j] for c in per_comp]
        value = float(np.dot(mixed.weights, [e.value for e in ests]))
        diag = {}
        for key, v in ests[0].diagnostics.items():
            if isinstance(v, (float, np.floating)):
                diag[key] = float(np.dot(mixed.weights, [e.diagnostics[key] for e in ests]))
            else:
                diag[key] = v
        diag["components"] = len(ests)
        out.append(OpeEstimate(value, ests[0].method, ests[0].signal, diag))
    return out


def parse_methods(text: str) -> List[str]:
    methods = [m.strip().upper() for m in text.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise CliError(f"unknown OPE method(s) {bad or [text]}; valid methods: {', '.join(METHODS)}")
    return methods


def cmd_evaluate(cfg: Dict, policy_path: Path, dataset_path: Path, methods: Sequence[str],
                 gamma: Optional[float], out_path: Optional[Path]) -> str:
    built = cfgmod.build(cfg)
    mixed = load_policy(policy_path)
    data = load_dataset(dataset_path)
    data.meta.setdefault("path", str(dataset_path))
    if gamma is None:
        gamma = built["fqe"].gamma
    rows = []
    for method in methods:
        rows.extend(evaluate_mixture(mixed, data, method, gamma, built["fqe"], cfg["game"]["bandwidth"]))
    report = format_report(rows)
    if out_path is not None:
        _write_text(out_path, report)
    return report


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def baselines(cfg: Dict, policy: Optional[MixedPolicy] = None) -> Dict[str, Dict[str, float]]:
    """Per-step rollout return and VaR of CRP, the behavior policy and optionally a learned policy."""
    built = cfgmod.build(cfg)
    series = price_series(cfg)
    rep, mk = cfg["report"], cfg["market"]
    horizon = rep["rollout_horizon"] or cfg["dataset"]["horizon"]
    episodes, seed, window, n = rep["rollout_episodes"], cfg["seed"], mk["window"], mk["n_stocks"]
    fns = {"crp": crp_fn(n), "behavior": behavior_fn(built["behavior"], window, n)}
    if policy is not None:
        fns["learned"] = mixed_fn(policy, episodes, seed)
    out = {}
    for name, fn in fns.items():
        res = simulate(series, fn, episodes, horizon, built["spec"], seed, window)
        out[name] = {"return": res.mean_log_return, "var": res.mean_var}
    return out


def _plot(path: Path, x, series: Dict[str, np.ndarray], hlines: Dict[str, float], ylabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "cbpl", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, y in series.items():
            ax.plot(x, y, marker="o", label=label)
        for k, (label, y) in enumerate(hlines.items()):
            ax.axhline(y, linestyle="--", color=f"C{k + len(series)}", label=label)
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def cmd_report(cfg: Dict, trace_path: Path, out_dir: Path, policy_path: Optional[Path] = None) -> Dict:
    trace = GameTrace.load(trace_path)
    tau = np.asarray(cfg["game"]["tau"], dtype=np.float64)
    if tau.size != trace.m:
        raise CliError(f"{trace_path}: trace has {trace.m} constraints but [game] tau has {tau.size}")
    policy = load_policy(policy_path) if policy_path is not None else None
    base = baselines(cfg, policy)
    out_dir.mkdir(parents=True, exist_ok=True)

    names = list(base)
    obj_header = ["t", "R_hat", "R_avg", "L_min", "L_max"] + [f"{k}_return" for k in names]
    obj_rows = [[r.t, r.r_hat, r.r_avg, r.l_min, r.l_max] + [base[k]["return"] for k in names]
                for r in trace.records]
    _write_text(out_dir / "objective.csv", _csv_text(obj_header, obj_rows))

    m = trace.m
    con_header = (["t"] + [f"G_hat_{j + 1}" for j in range(m)] + [f"G_avg_{j + 1}" for j in range(m)]
                  + [f"tau_{j + 1}" for j in range(m)] + [f"{k}_var" for k in names])
    con_rows = [[r.t] + list(r.g_hat) + list(r.g_avg) + list(tau) + [base[k]["var"] for k in names]
                for r in trace.records]
    _write_text(out_dir / "constraint.csv", _csv_text(con_header, con_rows))

    t = [r.t for r in trace.records]
    _plot(out_dir / "objective.svg", t,
          {"R_hat": [r.r_hat for r in trace.records], "R_avg": [r.r_avg for r in trace.records]},
          {f"{k} rollout": base[k]["return"] for k in names}, "per-step log return")
    con_series = {}
    for j in range(m):
        con_series[f"G_hat_{j + 1}"] = [r.g_hat[j] for r in trace.records]
        con_series[f"G_avg_{j + 1}"] = [r.g_avg[j] for r in trace.records]
    _plot(out_dir / "constraint.svg", t, con_series,
          {f"tau_{j + 1}": float(tau[j]) for j in range(m)}, "VaR")
    return base


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbpl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", type=Path, help="experiment config (TOML)")
        p.add_argument("--out", type=Path, required=True, help=out_help)
        p.add_argument("--seed", type=int, help="overrides the config seed")

    p = sub.add_parser("gen-data", help="generate a behavior dataset")
    common(p, "dataset file to write")

    p = sub.add_parser("train", help="run the Lagrangian game on a dataset")
    common(p, "output directory")
    p.add_argument("--data", type=Path, required=True, help="dataset file")

    p = sub.add_parser("evaluate", help="off-policy estimates for a policy")
    common(p, "report file to write")
    p.add_argument("--policy", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--method", default="FQE,IS,DR", help="comma-separated list of FQE, IS, DR")
    p.add_argument("--gamma", type=float, help="discount (default: [fqe] gamma)")

    p = sub.add_parser("report", help="plot data for a training trace")
    common(p, "output directory")
    p.add_argument("--trace", type=Path, required=True)
    p.add_argument("--policy", type=Path, help="also roll out this policy")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        methods = parse_methods(args.method) if args.command == "evaluate" else None
        cfg = _resolve_config(args)
        start = time.perf_counter()
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.data, args.out)
        elif args.command == "evaluate":
            report = cmd_evaluate(cfg, args.policy, args.data, methods, args.gamma, args.out)
            sys.stdout.write(report)
        elif args.command == "report":
            cmd_report(cfg, args.trace, args.out, args.policy)
        _log(f"{args.command} finished in {time.perf_counter() - start:.1f}s")
    except (cfgmod.ConfigError, CliError, OpeError, OSError, ValueError, RuntimeError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

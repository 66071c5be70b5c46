"""Command-line experiment runner.

Every command is a pure function of its flags, config file and seed, and
writes a CSV whose first line is a versioned ``#`` comment. Exit codes:
0 ok, 1 usage or configuration error, 2 a safety invariant was violated.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import re
import sys
from importlib import resources
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .agents import CommitteeGame, GameParams, Strategy, as_fraction, p_invalid_q, pivotal_probability
from .analysis import (
    DEFAULT_ALPHAS,
    DEFAULT_EPSILONS,
    committee_size_table,
    nic_check,
    write_committee_size_csv,
)
from .bft import supermajority_threshold
from .sim import (
    REFERENCE_BLOCK_TIMES,
    ConfigError,
    LatencyModel,
    SessionConfig,
    consensus_round_time,
    run_session,
    throughput,
    write_metrics_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_VIOLATION = 0, 1, 2
EXAMPLE = "example"  # --config alias for the bundled example session

TPS_VERSION = "ashwachain-tps-sweep/1"
TPS_COLUMNS = ("n_csl", "mode", "block_time_s", "tps")
DELTA_VERSION = "ashwachain-delta/1"
DELTA_COLUMNS = ("n_csl", "threshold", "q", "p_invalid_s1", "p_invalid_s2", "delta", "delta_closed_form")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2; 2 is reserved for violations
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config files --------------------------------------------------------------


def _int(v: str) -> int:
    return int(v, 0)


def _opt_float(v: str) -> float | None:
    return None if v.strip().lower() in ("", "none", "auto") else float(v)


def _opt_int(v: str) -> int | None:
    return None if v.strip().lower() in ("", "none", "auto") else int(v)


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.replace(",", " ").split())


def _calibration(v: str) -> dict[int, float] | None:
    v = v.strip().lower()
    if v in ("", "none", "off", "model"):
        return None
    if v == "reference":
        return dict(REFERENCE_BLOCK_TIMES)
    table = {}
    for item in v.replace(",", " ").split():
        n, t = item.split(":")
        table[int(n)] = float(t)
    return table


# section -> key -> converter; keys are SessionConfig (or nested config) field names
_SCHEMA: dict[str, dict[str, Callable[[str], Any]]] = {
    "session": {
        "seed": _int,
        "n_csl": _int,
        "duration_rounds": _int,
        "block_bytes": _int,
        "tx_bytes": _int,
        "tx_blocks_per_round": _int,
        "tx_fill": float,
        "tx_rate": _opt_float,
        "n_accounts": _int,
        "account_balance": _int,
        "block_reward": _int,
        "stall_limit": _opt_int,
        "liveness_slack": _int,
    },
    "agents": {
        "n_honest": _int,
        "n_rational": _int,
        "n_byzantine": _int,
        "alphas": _floats,
        "kappas": _floats,
        "rho_s1": float,
        "byzantine_mode": str,
    },
    "game": {k: Fraction for k in ("tr", "c_mine", "c_val", "phi", "kappa_r")} | {"n_tx": _int},
    "acl": {"difficulty": _int, "finality_depth": _int, "expected_block_interval": float, "max_nonce_tries": _int},
    "bft": {
        "latency_window": _opt_float,
        "view_change_timeout": _opt_float,
        "delay_low": float,
        "delay_high": _opt_float,
    },
    "latency": {"base": float, "per_message": float, "quadratic_factor": float, "calibration": _calibration},
}


def _locate(text: str) -> dict[tuple[str, str], int]:
    """(section, key) -> 1-based line number, for diagnostics."""
    where: dict[tuple[str, str], int] = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            where[(section, "")] = lineno
            continue
        m = re.match(r"\s*([^#;=:\s][^=:]*?)\s*[=:]", line)
        if m:
            where[(section, m.group(1).strip().lower())] = lineno
    return where


def example_config_path() -> Path:
    return Path(str(resources.files("ashwachain") / "data" / "example_session.ini"))


def load_session_config(path: str | Path) -> SessionConfig:
    """Read an INI session config. Errors are ConfigError('path:line: message')."""
    path = example_config_path() if str(path) == EXAMPLE else Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    where = _locate(text)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None

    def fail(section: str, key: str, msg: str) -> ConfigError:
        line = where.get((section, key), where.get((section, ""), 0))
        return ConfigError(f"{path}:{line}: [{section}] {key + ': ' if key else ''}{msg}")

    values: dict[str, dict[str, Any]] = {s: {} for s in _SCHEMA}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise fail(section, "", f"unknown section (expected one of {', '.join(_SCHEMA)})")
        for key, raw in parser.items(section):
            conv = _SCHEMA[section].get(key)
            if conv is None:
                raise fail(section, key, "unknown key")
            try:
                values[section][key] = conv(raw)
            except (ValueError, ZeroDivisionError) as exc:
                raise fail(section, key, f"bad value {raw!r} ({exc})") from None

    defaults = {f: getattr(SessionConfig(), f) for f in SessionConfig.__dataclass_fields__}
    kwargs = dict(defaults)
    kwargs.update(values["session"])
    agents = dict(values["agents"])
    if "n_csl" in values["session"] and not {"n_honest", "n_rational", "n_byzantine"} & agents.keys():
        agents["n_honest"] = values["session"]["n_csl"]
    kwargs.update(agents)
    latency = dict(values["latency"])
    if "calibration" in latency:
        kwargs["calibration"] = latency.pop("calibration")
    try:
        kwargs["game"] = replace(defaults["game"], **values["game"])
        kwargs["acl"] = replace(defaults["acl"], **values["acl"])
        kwargs["bft"] = replace(defaults["bft"], **values["bft"])
        kwargs["latency"] = replace(defaults["latency"], **latency)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    try:
        cfg = SessionConfig(**kwargs)
    except ConfigError as exc:
        msg = str(exc)
        section, key = "agents", ""
        for sec, keys in _SCHEMA.items():
            hit = next((k for k in keys if msg.startswith(k) and k in values[sec]), None)
            if hit:
                section, key = sec, hit
                break
        if "n_honest + n_rational + n_byzantine" in msg:
            section, key = "agents", ""
        raise fail(section, key, msg) from None
    try:
        cfg.bft.resolved(consensus_round_time(cfg.n_csl, cfg.latency, cfg.calibration))
    except ValueError as exc:
        raise fail("bft", "", str(exc)) from None
    return cfg


# -- commands --------------------------------------------------------------------


def _open_out(path: str | None):
    if path is None or path == "-":
        return sys.stdout, False
    try:
        return open(path, "w", newline=""), True
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None


def _emit(path: str | None, fill: Callable[[io.TextIOBase], None]) -> None:
    buf = io.StringIO()
    fill(buf)
    out, close = _open_out(path)
    try:
        out.write(buf.getvalue())
    finally:
        if close:
            out.close()


def cmd_committee_size(args: argparse.Namespace) -> int:
    alphas = args.alphas or DEFAULT_ALPHAS
    epsilons = args.epsilons or DEFAULT_EPSILONS
    if any(not 0 <= a < 1 for a in alphas) or any(not 0 < e < 1 for e in epsilons):
        raise UsageError("alphas must be in [0, 1) and epsilons in (0, 1)")
    rows = committee_size_table(alphas, epsilons, args.max_n, args.parallel)
    _emit(args.out, lambda f: write_committee_size_csv(rows, f))
    return EXIT_OK


def cmd_tps_sweep(args: argparse.Namespace) -> int:
    sizes = args.sizes or sorted(REFERENCE_BLOCK_TIMES)
    if any(n < 1 for n in sizes):
        raise UsageError("committee sizes must be >= 1")
    calibration = REFERENCE_BLOCK_TIMES if args.calibration else None
    model = LatencyModel(args.base, args.per_message, args.quadratic_factor)
    mode = "calibration" if calibration else "model"

    def fill(f: io.TextIOBase) -> None:
        f.write(f"# {TPS_VERSION}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TPS_COLUMNS)
        for n in sorted(set(sizes)):
            t = consensus_round_time(n, model, calibration)
            w.writerow([n, mode, f"{t:.6f}", f"{throughput(t, args.block_bytes, args.tx_bytes):.6f}"])

    _emit(args.out, fill)
    return EXIT_OK


def cmd_delta(args: argparse.Namespace) -> int:
    sizes = args.sizes or [4, 7, 10, 13, 16]
    qs = [as_fraction(q) for q in (args.qs or ["0.1", "0.3", "0.5"])]
    if any(n < 1 for n in sizes) or any(not 0 <= q <= 1 for q in qs):
        raise UsageError("sizes must be >= 1 and q in [0, 1]")

    def fill(f: io.TextIOBase) -> None:
        f.write(f"# {DELTA_VERSION}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(DELTA_COLUMNS)
        for n in sorted(set(sizes)):
            k = args.threshold or supermajority_threshold(n)
            for q in sorted(set(qs)):
                p1 = p_invalid_q(n, q, Strategy.S1, k)
                p2 = p_invalid_q(n, q, Strategy.S2, k)
                closed = pivotal_probability(n - 1, k, q)
                w.writerow([n, k, str(q), f"{float(p1):.15e}", f"{float(p2):.15e}", f"{float(p1 - p2):.15e}", f"{float(closed):.15e}"])

    _emit(args.out, fill)
    return EXIT_OK


def cmd_nic_check(args: argparse.Namespace) -> int:
    if args.config:
        cfg = load_session_config(args.config)
        params, n_b, n_csl = cfg.game, cfg.n_byzantine, cfg.n_csl
        kappas = [k for k, t in zip(cfg.agent_kappas(), cfg.agent_types()) if t.value == "rational"]
        game = CommitteeGame(params, cfg.n_honest, cfg.n_byzantine, kappas, cfg.adversary_alpha())
        dmin = game.delta_min() if args.delta_min is None else as_fraction(args.delta_min)
    else:
        missing = [f for f in ("tr", "c_mine", "c_val", "phi", "kappa_r", "n_csl", "delta_min") if getattr(args, f) is None]
        if missing:
            raise UsageError("without --config, nic-check needs --" + ", --".join(m.replace("_", "-") for m in missing))
        params = GameParams(args.tr, args.c_mine, args.c_val, args.phi, args.n_tx, args.kappa_r)
        n_b, n_csl, dmin = args.n_b, args.n_csl, as_fraction(args.delta_min)
    report = nic_check(params, n_b, n_csl, dmin)
    _emit(args.out, lambda f: f.write("".join(line + "\n" for line in [f"delta_min {float(dmin):.12e}", *report.lines()])))
    return EXIT_OK


def _simulate_one(cfg: SessionConfig):
    res = run_session(cfg)
    return res.metrics, res.trace.render()


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = load_session_config(args.config) if args.config else SessionConfig(block_bytes=4096)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    seeds = [cfg.seed + i for i in range(args.runs)]
    configs = [replace(cfg, seed=s) for s in seeds]
    if args.parallel > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_simulate_one, configs))
    else:
        results = [_simulate_one(c) for c in configs]
    metrics = [m for m, _ in results]
    _emit(args.out, lambda f: write_metrics_csv(metrics, f))
    if args.trace:
        for (m, text), s in zip(results, seeds):
            path = args.trace if len(seeds) == 1 else f"{args.trace}.{s}"
            _emit(path, lambda f, t=text: f.write(t))
    bad = [m for m in metrics if not m.safe]
    for m in bad:
        print(
            f"safety violation: seed {m.seed}: invalid commits {m.invalid_blocks_committed}, "
            f"conflicting commits {m.safety_violations}, replicas consistent {m.replicas_consistent}",
            file=sys.stderr,
        )
    return EXIT_VIOLATION if bad else EXIT_OK


def _csv_floats(v: str) -> list[float]:
    try:
        return [float(x) for x in v.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {v!r}") from None


def _csv_ints(v: str) -> list[int]:
    try:
        return [int(x) for x in v.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {v!r}") from None


def _csv_strs(v: str) -> list[str]:
    return [x.strip() for x in v.split(",") if x.strip()]


def _positive(v: str) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ashwachain", description="Committee sizing, incentive checks and protocol simulation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp: argparse.ArgumentParser, config: bool = False) -> None:
        sp.add_argument("--out", help="output CSV path (default stdout)")
        sp.add_argument("--parallel", type=_positive, default=1, help="worker processes")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if config:
            sp.add_argument("--config", help="INI config with [session] [agents] [game] [acl] [bft] [latency], or the word example")

    cs = sub.add_parser("committee-size", help="minimum committee size per (alpha_A, epsilon)")
    common(cs)
    cs.add_argument("--alphas", type=_csv_floats, help="adversary fractions (default 0.01..0.18)")
    cs.add_argument("--epsilons", type=_csv_floats, help="failure bounds (default 2e-4,2e-5,2e-6)")
    cs.add_argument("--max-n", type=_positive, default=1000)
    cs.set_defaults(func=cmd_committee_size)

    nc = sub.add_parser("nic-check", help="evaluate the three incentive-compatibility conditions")
    common(nc, config=True)
    for name in ("tr", "c-mine", "c-val", "phi", "kappa-r"):
        nc.add_argument(f"--{name}", type=Fraction)
    nc.add_argument("--n-tx", type=_positive, default=1)
    nc.add_argument("--n-b", type=int, default=0)
    nc.add_argument("--n-csl", type=_positive)
    nc.add_argument("--delta-min", type=str)
    nc.set_defaults(func=cmd_nic_check)

    dl = sub.add_parser("delta", help="pivotal probability table")
    common(dl)
    dl.add_argument("--sizes", type=_csv_ints)
    dl.add_argument("--qs", type=_csv_strs)
    dl.add_argument("--threshold", type=_positive, help="default: supermajority of each size")
    dl.set_defaults(func=cmd_delta)

    sm = sub.add_parser("simulate", help="run protocol sessions and write metrics")
    common(sm, config=True)
    sm.add_argument("--runs", type=_positive, default=1, help="consecutive seeds to run")
    sm.add_argument("--trace", help="trace output path (suffixed with the seed when --runs > 1)")
    sm.set_defaults(func=cmd_simulate)

    tp = sub.add_parser("tps-sweep", help="block time and throughput against committee size")
    common(tp)
    tp.add_argument("--sizes", type=_csv_ints)
    tp.add_argument("--calibration", action=argparse.BooleanOptionalAction, default=True,
                    help="use the measured block-time table (default) or the latency model")
    tp.add_argument("--block-bytes", type=_positive, default=16 * 2**20)
    tp.add_argument("--tx-bytes", type=_positive, default=200)
    defaults = LatencyModel()
    tp.add_argument("--base", type=float, default=defaults.base)
    tp.add_argument("--per-message", type=float, default=defaults.per_message)
    tp.add_argument("--quadratic-factor", type=float, default=defaults.quadratic_factor)
    tp.set_defaults(func=cmd_tps_sweep)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"ashwachain: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"ashwachain: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

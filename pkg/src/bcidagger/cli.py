"""Command-line front end.

Config files are plain text, one ``key=value`` per line, ``#`` starts a
comment. ``preset=NAME`` (file or ``--preset``) loads a named baseline;
every other key overrides a field of the experiment config. ``--set``
overrides are applied last.

Exit codes: 0 ok, 2 config error, 3 runtime error (including any failed
repeat).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import shutil
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .harness import ExperimentConfig, ExperimentResult, final_sse, mismatch_sweep, run_experiment, summarize
from .rates import StreamConfig, fit_rates, r_squared, rate_rows, run_rates

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

ARM_BASE = {"task": "arm", "n_neurons": 75, "d_dof": 26, "T_max": 150, "n_repeats": 50, "K": 30,
            "encoder_mode": "rectified"}

PRESETS: dict[str, dict[str, object]] = {
    "cursor_fig2": {"task": "cursor", "n_neurons": 10, "d_dof": 3, "T_max": 200, "n_repeats": 100, "K": 50},
    "cursor_mismatch_fig7": {"task": "cursor", "n_neurons": 10, "d_dof": 3, "T_max": 200, "n_repeats": 100,
                             "K": 50, "sweep": (0.0, 0.25, 0.5, 1.0)},
    "arm_fig4": dict(ARM_BASE),
    "arm_correlation_fig5": dict(ARM_BASE, correlation=True),
    "regret_rates_table1": {"task": "rates"},
}

METRIC_COLUMNS = ["repeat", "k", "algorithm", "sse", "mse", "steps", "acquired", "regret", "gamma_k"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSpec:
    """A resolved run: one experiment config, optionally swept over
    intention-noise fractions, or a regret-rate stream config."""

    config: ExperimentConfig | StreamConfig
    preset: str | None = None
    sweep: tuple[float, ...] | None = None

    @property
    def is_rates(self) -> bool:
        return isinstance(self.config, StreamConfig)


_OPTIONAL_FLOAT = {"reg", "action_noise"}
_OPTIONAL_STR = {"arm_chain"}


def _field_defaults(cls) -> dict[str, object]:
    return {f.name: f.default for f in dataclasses.fields(cls)}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    vals = tuple(float(v) for v in text.replace(" ", "").split(",") if v)
    if not vals:
        raise ValueError("empty list")
    return vals


def convert(cls, key: str, text: str):
    """Convert ``text`` to the type of field ``key`` of ``cls``."""
    if key == "sweep":
        return _floats(text)
    defaults = _field_defaults(cls)
    if key not in defaults:
        raise KeyError(key)
    default = defaults[key]
    if key in _OPTIONAL_FLOAT:
        return None if text.strip().lower() in ("none", "auto", "") else float(text)
    if key in _OPTIONAL_STR:
        return None if text.strip().lower() in ("none", "") else text.strip()
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return _floats(text)
    return text.strip()


def read_pairs(lines, source: str) -> list[tuple[str, str, str]]:
    """``(key, value, location)`` triples from ``key=value`` lines."""
    out = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out.append((key, value, f"{source}:{lineno}"))
    return out


def resolve(pairs: list[tuple[str, str, str]], preset: str | None = None) -> RunSpec:
    """Build a :class:`RunSpec` from a preset and ordered overrides."""
    for key, value, _ in pairs:
        if key == "preset":
            preset = value
    values: dict[str, object] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r} (known: {', '.join(PRESETS)})")
        values.update(PRESETS[preset])
    for key, value, where in pairs:
        if key == "task":
            values["task"] = value
    task = values.get("task", "cursor")
    cls = StreamConfig if task == "rates" else ExperimentConfig
    for key, value, where in pairs:
        if key in ("preset", "task"):
            continue
        if key == "sweep" and cls is StreamConfig:
            raise ConfigError(f"{where}: unknown key 'sweep' for rates runs")
        try:
            values[key] = convert(cls, key, value)
        except KeyError:
            raise ConfigError(f"{where}: unknown key {key!r}") from None
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
        # validate as we go so a bad value is reported at its own line
        try:
            _build(cls, values)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
    try:
        config, sweep = _build(cls, values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return RunSpec(config, preset, sweep)


def _build(cls, values: dict):
    values = dict(values)
    sweep = values.pop("sweep", None)
    if cls is StreamConfig:
        values.pop("task", None)
    if sweep is not None and any(r < 0 for r in sweep):
        raise ValueError("sweep fractions must be nonnegative")
    return cls(**values), None if sweep is None else tuple(sweep)


def parse_config(path: str | Path | None = None, preset: str | None = None,
                 overrides: list[str] | tuple[str, ...] = ()) -> RunSpec:
    """Resolve a config file and/or preset plus ``key=value`` overrides."""
    pairs = []
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        pairs += read_pairs(text.splitlines(), str(p))
    pairs += read_pairs(list(overrides), "--set")
    if path is None and preset is None and not pairs:
        raise ConfigError("no config: give --config or --preset")
    return resolve(pairs, preset)


# --- export --------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def export_experiment(result: ExperimentResult, out: Path, trace: bool = False) -> None:
    cfg = result.config
    write_csv(out / "metrics.csv", METRIC_COLUMNS,
              ([m.repeat, m.k, cfg.algo, m.sse, m.mse, m.steps, m.acquired, m.running_regret, m.gamma_k]
               for r in result.repeats for m in r.metrics))
    summary = summarize(result)
    write_csv(out / "summary.csv", ["k", "median_sse", "mean_sse", "lo_2se", "hi_2se"],
              ([s["k"], s["median_sse"], s["mean_sse"], s["lo_2se"], s["hi_2se"]] for s in summary))
    if cfg.correlation:
        write_csv(out / "correlation.csv", ["repeat", "k", "dof", "r"],
                  ([rep, k, d, "" if v is None else v] for r in result.repeats for rep, k, d, v in r.correlations))
    if trace:
        tdir = out / "traces"
        tdir.mkdir()
        D = cfg.d_dof
        header = (["repeat", "k", "t"] + [f"p{i}" for i in range(D)] + [f"v{i}" for i in range(D)]
                  + [f"oracle{i}" for i in range(D)] + [f"decoded{i}" for i in range(D)]
                  + [f"executed{i}" for i in range(D)])
        for r in result.repeats:
            rows = []
            for k in sorted(r.traces):
                tr = r.traces[k]
                for t in range(len(tr.positions)):
                    rows.append([r.repeat, k, t, *tr.positions[t], *tr.velocities[t], *tr.oracle[t],
                                 *tr.decoded[t], *tr.executed[t]])
            write_csv(tdir / f"repeat_{r.repeat:04d}.csv", header, rows)


def export_rates(config: StreamConfig, curves: dict[str, np.ndarray], out: Path) -> dict:
    rows = rate_rows(config, curves)
    logk = np.log(config.grid.astype(float))
    fits = {}
    for algo, M in curves.items():
        y = M.mean(axis=0)
        slope, intercept = np.polyfit(logk, y, 1)
        fits[algo] = (float(slope), float(intercept), r_squared(logk, y))
    cols = ["algorithm", "K", "mean_regret", "se", "regret_over_logK", "regret_over_sqrtK", "regret_over_K"]
    write_csv(out / "rates.csv", cols + ["slope_logK", "intercept_logK", "r2_logK"],
              ([row[c] for c in cols] + list(fits[row["algorithm"]]) for row in rows))
    return dataclasses.asdict(fit_rates(config, curves))


def _config_dict(config) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(config).items()}


def run_and_export(spec: RunSpec, out_dir: str | Path, trace: bool = False) -> int:
    """Run ``spec`` and write every output under ``out_dir``.

    Outputs are staged in a temporary directory and moved into place only
    after everything has been written, so a failure leaves nothing partial.
    Returns the exit code.
    """
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".bci-sim-", dir=out_dir.parent))
    manifest: dict = {"version": __version__, "preset": spec.preset, "config": _config_dict(spec.config),
                      "seed": spec.config.base_seed}
    failed: list[dict] = []
    try:
        if spec.is_rates:
            manifest["kind"] = "regret_rates"
            curves = run_rates(spec.config)
            manifest["fits"] = export_rates(spec.config, curves, stage)
        elif spec.sweep is not None:
            manifest["kind"] = "mismatch_sweep"
            manifest["sweep"] = list(spec.sweep)
            results = mismatch_sweep(spec.config, spec.sweep, keep_traces=trace)
            rows = []
            for rho, res in results.items():
                sub = stage / f"noise_{rho:g}"
                sub.mkdir()
                export_experiment(res, sub, trace)
                f = final_sse(res)
                rows.append([rho, float(np.median(f)) if f.size else float("nan"), len(res.failed)])
                failed += [{"noise_fraction": rho, "repeat": r.repeat, "error": r.error} for r in res.failed]
            write_csv(stage / "sweep.csv", ["noise_fraction", "median_final_sse", "failed_repeats"], rows)
        else:
            manifest["kind"] = "experiment"
            res = run_experiment(spec.config, keep_traces=trace)
            export_experiment(res, stage, trace)
            failed += [{"repeat": r.repeat, "error": r.error} for r in res.failed]
        manifest["failed_repeats"] = failed
        (stage / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        stage.rename(out_dir)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    if failed:
        print(f"error: {len(failed)} repeat(s) failed; see manifest.json", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bci-sim", description="Closed-loop decoder training simulations.")
    p.add_argument("--config", metavar="PATH", help="key=value config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named baseline config")
    p.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    p.add_argument("--trace", action="store_true", help="write per-step trace files")
    p.add_argument("--repeats", type=int, metavar="N", help="override n_repeats")
    p.add_argument("--seed", type=int, metavar="S", help="override base_seed")
    p.add_argument("--algo", choices=["ogd", "ma", "ftl", "rls"], help="override the update rule")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                   help="override one config key (repeatable)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.repeats is not None:
        overrides.append(f"n_repeats={args.repeats}")
    if args.seed is not None:
        overrides.append(f"base_seed={args.seed}")
    if args.algo is not None:
        overrides.append(f"algo={args.algo}")
    try:
        spec = parse_config(args.config, args.preset, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if spec.is_rates and args.trace:
        print("config error: --trace does not apply to regret-rate runs", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run_and_export(spec, args.out, args.trace)
    except (OSError, ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

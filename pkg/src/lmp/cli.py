"""``lmp simulate|estimate|diagnose|replicate --config run.toml``.

Every artifact is written with a ``.partial`` suffix and renamed when the
command succeeds, so an interrupted or failed run never leaves a
complete-looking file behind. Exit codes: 0 ok, 1 invariant failure,
2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .diagnostics import build_report
from .msem import ModelParams, MsemDivergence, config_dict, run_msem
from .panel_io import PanelError, load_dataset
from .qreg import SolverError
from .simulator import simulate, write_simulation

logger = logging.getLogger("lmp")

COMMANDS = ("simulate", "estimate", "diagnose", "replicate")
EXIT_OK, EXIT_INVARIANT, EXIT_USAGE = 0, 1, 2
PARTIAL = ".partial"


class InvariantError(RuntimeError):
    """A produced artifact violates a model invariant."""


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Artifacts:
    """Collects ``.partial`` files under one output directory."""

    def __init__(self, root: Path):
        self.root = root
        self.paths: list[Path] = []

    def path(self, name: str) -> Path:
        target = self.root / (name + PARTIAL)
        target.parent.mkdir(parents=True, exist_ok=True)
        self.paths.append(target)
        return target

    def add(self, paths):
        self.paths.extend(Path(p) for p in paths)

    def write_text(self, name: str, text: str) -> Path:
        target = self.path(name)
        target.write_text(text)
        return target

    def write_json(self, name: str, payload) -> Path:
        try:
            text = json.dumps(payload, indent=2, allow_nan=False) + "\n"
        except ValueError as exc:
            raise InvariantError(f"non-finite value in {name}") from exc
        return self.write_text(name, text)

    def commit(self) -> list[Path]:
        final = []
        for partial in self.paths:
            done = partial.with_name(partial.name[: -len(PARTIAL)])
            partial.replace(done)
            final.append(done)
        self.paths = []
        return final


# ---------------------------------------------------------------------------
# stages


def stage_simulate(config: RunConfig, art: Artifacts, prefix: str = "", kind: str | None = None):
    spec = config.dgp_config(kind)
    params = ModelParams.load(config.params) if spec.kind == "fitted" else None
    data, truth = simulate(spec, params)
    target = art.root / prefix
    target.mkdir(parents=True, exist_ok=True)
    art.add(write_simulation(data, truth, target, suffix=PARTIAL))
    art.write_json(prefix + "dgp.json", spec.to_dict())
    return data, truth


def stage_estimate(config: RunConfig, panel_path, art: Artifacts, prefix: str = ""):
    data = load_dataset(panel_path)
    msem_config = config.msem_config()
    checkpoint = art.path(prefix + "checkpoint.json")
    try:
        params, state = run_msem(data, msem_config, init=config.init, checkpoint=checkpoint)
    except MsemDivergence as exc:
        # the dump exists to show the non-finite values, so NaN is kept
        art.write_text(prefix + "divergence.json", json.dumps(exc.dump, indent=2) + "\n")
        raise
    checkpoint.unlink()
    art.paths.remove(checkpoint)
    if not all(np.all(np.isfinite(s.coeffs)) for s in params.sieves()):
        raise InvariantError("fitted sieve coefficients are not finite")
    art.write_text(prefix + "params.json", json.dumps(params.to_dict(), indent=2) + "\n")
    art.write_json(prefix + "trace.json", {
        "loglik": state.loglik_trace,
        "surrogate_loss": state.surrogate_loss_trace,
        "acceptance": state.acceptance_trace,
        "msem": {k: v for k, v in config_dict(msem_config).items() if k != "threads"},
        "init": config.init,
    })
    art.write_json(prefix + "panel.meta.json", data.meta())
    return data, params, state


def stage_diagnose(config: RunConfig, params: ModelParams, data, art: Artifacts, prefix: str = ""):
    report = build_report(params, data, config.diagnostics_config())
    try:
        art.add(report.write(art.root / prefix, suffix=PARTIAL))
    except ValueError as exc:
        raise InvariantError(f"non-finite diagnostic: {exc}") from exc
    return report


def summarize(kind: str, report, state) -> dict:
    surface = report.surface("U").values
    skew = report.skewness_curves["U"]["values"]
    growth = report.growth_moments
    variances = [growth[h].variance for h in sorted(growth)]
    return {
        "kind": kind,
        "persistence_U_mean": float(surface.mean()),
        "persistence_U_min": float(surface.min()),
        "persistence_U_max": float(surface.max()),
        "skewness_U_p10": float(skew[0]),
        "skewness_U_p90": float(skew[-1]),
        "excess_kurtosis_V": report.marginal_densities["V"].excess_kurtosis,
        "growth_variance_increasing": bool(np.all(np.diff(variances) > 0)),
        "growth_kurtosis_h2": growth[2].kurtosis if 2 in growth else None,
        "normalization_U": report.normalization_deviation["U"],
        "normalization_V": report.normalization_deviation["V"],
        "final_acceptance": state.acceptance_trace[-1],
    }


# ---------------------------------------------------------------------------
# commands


def _require(config: RunConfig, command: str):
    """Check inputs exist before the output directory is touched."""
    needed = []
    if command == "estimate":
        needed.append(("panel", config.panel))
    if command == "diagnose":
        needed.append(("params", config.params))
    if command == "simulate" and config.dgp.get("kind") == "fitted":
        needed.append(("params", config.params))
    for key, value in needed:
        if value is None:
            raise ConfigError(f"'{key}' is required for {command}")
        if not Path(value).is_file():
            raise FileNotFoundError(f"{key} file not found: {value}")
    if command == "diagnose" and config.panel is not None and not Path(config.panel).is_file():
        raise FileNotFoundError(f"panel file not found: {config.panel}")
    return [Path(v) for _, v in needed] + ([Path(config.panel)] if command == "diagnose" and config.panel else [])


def run_command(command: str, config: RunConfig) -> dict:
    inputs = _require(config, command)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    art = Artifacts(out)
    echo = config.to_toml()
    art.write_text("config.toml", echo)
    started = datetime.now(timezone.utc).isoformat()
    clock = time.perf_counter()
    summary = None

    if command == "simulate":
        stage_simulate(config, art)
    elif command == "estimate":
        stage_estimate(config, config.panel, art)
    elif command == "diagnose":
        data = load_dataset(config.panel) if config.panel else None
        stage_diagnose(config, ModelParams.load(config.params), data, art)
    elif command == "replicate":
        summary = []
        for kind in config.replicate_kinds:
            logger.info("replicate: %s", kind)
            prefix = f"{kind}/"
            stage_simulate(config, art, prefix, kind)
            # the estimate stage reads the panel back, exactly as `lmp estimate` would
            panel = art.root / prefix / ("panel.csv" + PARTIAL)
            data, params, state = stage_estimate(config, panel, art, prefix)
            report = stage_diagnose(config, params, data, art, prefix)
            summary.append(summarize(kind, report, state))
        art.write_json("summary.json", summary)
        table = art.path("summary.csv")
        with open(table, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["kind", "metric", "value"])
            for row in summary:
                for key, value in row.items():
                    if key != "kind":
                        writer.writerow([row["kind"], key, repr(value)])

    files = art.commit()
    digest = hashlib.sha256(echo.encode())
    for path in inputs:
        digest.update(path.read_bytes())
    manifest = {
        "command": command,
        "version": __version__,
        "seed": config.seed,
        "inputs_sha256": digest.hexdigest(),
        "artifacts": {str(p.relative_to(out)): _sha256(p) for p in sorted(files)},
        "started": started,
        "wall_time_s": round(time.perf_counter() - clock, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    if summary is not None:
        print(format_summary(summary))
    return manifest


def format_summary(rows) -> str:
    keys = [k for k in rows[0] if k != "kind"]
    width = max(len(k) for k in keys)
    lines = [" " * width + "".join(f"{r['kind']:>18}" for r in rows)]
    for key in keys:
        cells = []
        for r in rows:
            v = r[key]
            cells.append(f"{v:>18.4f}" if isinstance(v, float) else f"{str(v):>18}")
        lines.append(f"{key:<{width}}" + "".join(cells))
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lmp {__version__}")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, help="run seed (overrides config)")
    parser.add_argument("--threads", type=int, help="worker threads (overrides config)")
    parser.add_argument("--quiet", action="store_true", help="only log warnings")
    return parser


def _error(exc: BaseException) -> str:
    return f"lmp: [{type(exc).__module__}] {exc}"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        config = load_config(args.config)
        overrides = {k: v for k, v in (("out", args.out), ("seed", args.seed), ("threads", args.threads))
                     if v is not None}
        if overrides:
            config = replace(config, **overrides)
        run_command(args.command, config)
    except (ConfigError, PanelError, OSError) as exc:
        print(_error(exc), file=sys.stderr)
        return EXIT_USAGE
    except (InvariantError, MsemDivergence, SolverError) as exc:
        print(_error(exc), file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: experiment selection, config files, reports.

Subcommands: ``attack`` (the probe matrix across configurations),
``covert``, ``property``, ``trace <file>``, and ``sweep`` (cartesian
product of experiments with bounded concurrency).  A JSON manifest file
supplies defaults; command-line flags win over it.  Reports are emitted
as an aligned table, CSV, or JSON and are byte-identical for identical
manifests (exit 0 on success, 1 when an experiment assertion fails, 2 on
configuration or parse errors).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import io
import json
import os
import random
import sys
from dataclasses import asdict, dataclass, field, fields

from .defense import DefenseConfig, DefenseId, SpdmKind, parse_defense_id, parse_spdm
from .harness import (
    ChannelRun,
    LrbsScenario,
    SecurityPropertyCase,
    TraceParseError,
    check_security_property,
    run_covert_channel,
    run_lrbs,
    run_trace_workload,
)
from .hierarchy import TimingModel
from .protocol import ConfigurationError

SCHEMA_VERSION = 1
OUT_DIR_ENV = "COHSIM_OUT"

ALL_CONFIGS = [c.value for c in DefenseId]


@dataclass
class RunManifest:
    """Everything needed to reproduce an experiment run.

    Every field has a default, so a manifest carrying only an experiment
    kind is runnable.
    """

    experiment: str = "attack"
    configs: list[str] = field(default_factory=lambda: list(ALL_CONFIGS))
    spdm: str = "branch-shadow"
    runs: int = 100
    training: int = 4
    seed: int = 0
    noise_jitter: int = 0
    property_n: int = 4
    payload_bits: int = 64
    repetitions: int = 16
    epoch_length: int = 1_000_000
    t_l1: int = 2
    t_l2: int = 16
    t_llc: int = 40
    t_mem: int = 140
    jobs: int = 1
    out: str | None = None
    format: str = "table"
    trace_file: str | None = None
    schema_version: int = SCHEMA_VERSION

    def timing(self) -> TimingModel:
        return TimingModel(self.t_l1, self.t_l2, self.t_llc, self.t_mem)

    def defense(self, config_id: str, spdm: str | None = None) -> DefenseConfig:
        return DefenseConfig(
            parse_defense_id(config_id), spdm=parse_spdm(spdm or self.spdm)
        )

    @classmethod
    def from_file(cls, path: str) -> "RunManifest":
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: manifest must be a JSON object")
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigurationError(
                f"{path}: unsupported schema_version {version} (expected {SCHEMA_VERSION})"
            )
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(
                f"{path}: unknown manifest keys {sorted(unknown)}"
            )
        return cls(**raw)


def _payload_from_seed(bits: int, seed: int) -> tuple[int, ...]:
    rng = random.Random(seed ^ 0xC0FFEE)
    return tuple(rng.randint(0, 1) for _ in range(bits))


# -- experiment runners (each returns a list of report rows) -------------------


def _attack_rows(manifest: RunManifest) -> list[dict]:
    rows = []
    for config_id in manifest.configs:
        config = manifest.defense(config_id)
        for secret in (0, 1):
            result = run_lrbs(
                LrbsScenario(
                    config,
                    secret,
                    training_iterations=manifest.training,
                    measurement_runs=manifest.runs,
                    timing=manifest.timing(),
                    seed=manifest.seed,
                    noise_jitter=manifest.noise_jitter,
                )
            )
            rows.append(
                {
                    "config": config_id,
                    "spdm": manifest.spdm,
                    "secret": secret,
                    "median_cycles": result.median_cycles,
                    "runs": len(result.cycles),
                    "redo_count": result.redo_count,
                    "remote_em_count": result.remote_em_count,
                }
            )
    return rows


def _covert_rows(manifest: RunManifest) -> list[dict]:
    rows = []
    payload = _payload_from_seed(manifest.payload_bits, manifest.seed)
    for config_id in manifest.configs:
        config = manifest.defense(config_id)
        run = ChannelRun(
            payload,
            epoch_length=manifest.epoch_length,
            repetitions=manifest.repetitions,
        )
        done = run_covert_channel(
            run,
            config,
            timing=manifest.timing(),
            seed=manifest.seed,
            noise_jitter=manifest.noise_jitter,
        )
        rows.append(
            {
                "config": config_id,
                "spdm": manifest.spdm,
                "payload_bits": len(payload),
                "closed": done.closed,
                "error_rate": done.error_rate,
                "calibration_0": done.calibration[0],
                "calibration_1": done.calibration[1],
            }
        )
    return rows


def _property_rows(manifest: RunManifest) -> tuple[list[dict], bool]:
    rows = []
    all_passed = True
    addresses = tuple(0x40000 + i * 0x1000 for i in range(manifest.property_n))
    for config_id in manifest.configs:
        config = manifest.defense(config_id)
        report = check_security_property(
            SecurityPropertyCase(addresses, config, timing=manifest.timing())
        )
        all_passed &= report.passed
        for mask, total in report.totals:
            rows.append(
                {
                    "config": config_id,
                    "spdm": manifest.spdm,
                    "n": manifest.property_n,
                    "subset": format(mask, f"0{manifest.property_n}b"),
                    "total_cycles": total,
                    "expected": report.expected_total,
                    "passed": report.passed,
                }
            )
    return rows, all_passed


def _trace_rows(manifest: RunManifest) -> list[dict]:
    if not manifest.trace_file:
        raise ConfigurationError("trace experiment requires a trace file")
    with open(manifest.trace_file) as fh:
        text = fh.read()
    rows = []
    for config_id in manifest.configs:
        config = manifest.defense(config_id)
        stats = run_trace_workload(
            text,
            config,
            timing=manifest.timing(),
            seed=manifest.seed,
            noise_jitter=manifest.noise_jitter,
        )
        ratio = stats.overhead_ratio
        rows.append(
            {
                "config": config_id,
                "spdm": manifest.spdm,
                "accesses": stats.total_accesses,
                "llc_fraction": round(stats.llc_fraction, 6),
                "redo_count": stats.redo_count,
                "redo_fraction": round(stats.redo_fraction, 6),
                "upgrade_fraction": round(stats.upgrade_fraction, 6),
                "torc_delay_cycles": stats.torc_delay_cycles,
                "redo_cycles": stats.redo_cycles,
                "overhead_ratio": "inf" if ratio == float("inf") else round(ratio, 6),
            }
        )
    return rows


def _sweep_cell(args: tuple) -> list[dict]:
    kind, manifest_dict = args
    manifest = RunManifest(**manifest_dict)
    if kind == "attack":
        return _attack_rows(manifest)
    if kind == "covert":
        return _covert_rows(manifest)
    rows, _ = _property_rows(manifest)
    return rows


def _sweep_rows(manifest: RunManifest) -> list[dict]:
    """Cartesian product: every experiment x config x SPDM."""
    cells = []
    for spdm in ("branch-shadow", "rob-head"):
        for config_id in manifest.configs:
            base = asdict(manifest)
            base.update(configs=[config_id], spdm=spdm)
            for kind in ("attack", "property", "covert"):
                cells.append((kind, dict(base)))
    if manifest.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(manifest.jobs) as pool:
            results = list(pool.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(cell) for cell in cells]
    rows = []
    for (kind, cell), cell_rows in zip(cells, results):
        for row in cell_rows:
            rows.append({"experiment": kind, **row})
    return rows


# -- report emission -------------------------------------------------------------


def _format_rows(rows: list[dict], fmt: str) -> str:
    if not rows:
        return "(no results)\n" if fmt == "table" else ""
    if fmt == "json":
        return json.dumps(rows, indent=2, sort_keys=True) + "\n"
    columns = list(rows[0].keys())
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()
    widths = {
        c: max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in columns
    }
    lines = [
        "  ".join(c.ljust(widths[c]) for c in columns),
        "  ".join("-" * widths[c] for c in columns),
    ]
    for r in rows:
        lines.append("  ".join(str(r.get(c, "")).ljust(widths[c]) for c in columns))
    return "\n".join(lines) + "\n"


def _emit(rows: list[dict], manifest: RunManifest) -> None:
    text = _format_rows(rows, manifest.format)
    out = manifest.out
    if out is None and os.environ.get(OUT_DIR_ENV):
        ext = {"table": "txt", "csv": "csv", "json": "json"}[manifest.format]
        out = os.path.join(
            os.environ[OUT_DIR_ENV], f"{manifest.experiment}.{ext}"
        )
    if out:
        os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# -- argument parsing -------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cohsim",
        description="Deterministic cache-coherence timing-defense simulator",
    )
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name, help_text in [
        ("attack", "probe timing matrix across defense configs"),
        ("covert", "covert-channel transmission and decode"),
        ("property", "constant-receiver-time property over all subsets"),
        ("trace", "statistics over a synthetic access trace"),
        ("sweep", "cartesian product of experiments with concurrency"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--manifest", help="JSON manifest file (flags override it)")
        p.add_argument("--config", action="append", dest="configs",
                       metavar="{c1..c5}", help="defense config (repeatable)")
        p.add_argument("--spdm", choices=["branch-shadow", "rob-head"])
        p.add_argument("--runs", type=int, help="measurement runs per cell")
        p.add_argument("--seed", type=int)
        p.add_argument("--noise-jitter", type=int, dest="noise_jitter",
                       metavar="CYCLES", help="uniform jitter on memory latency")
        p.add_argument("--jobs", type=int, help="sweep concurrency")
        p.add_argument("--out", help="output path (default: stdout or $COHSIM_OUT)")
        p.add_argument("--format", choices=["table", "csv", "json"])
        if name == "property":
            p.add_argument("-n", type=int, dest="property_n",
                           help="address group size (1..8)")
        if name == "covert":
            p.add_argument("--payload-bits", type=int, dest="payload_bits")
            p.add_argument("--repetitions", type=int)
        if name == "trace":
            p.add_argument("trace_file", help="trace file (core op address lines)")
    return parser


def _manifest_from_args(args: argparse.Namespace) -> RunManifest:
    manifest = (
        RunManifest.from_file(args.manifest)
        if getattr(args, "manifest", None)
        else RunManifest()
    )
    manifest.experiment = args.experiment
    for key in (
        "configs", "spdm", "runs", "seed", "noise_jitter", "jobs",
        "out", "format", "property_n", "payload_bits", "repetitions",
        "trace_file",
    ):
        value = getattr(args, key, None)
        if value is not None:
            setattr(manifest, key, value)
    for config_id in manifest.configs:
        parse_defense_id(config_id)
    parse_spdm(manifest.spdm)
    if not 1 <= manifest.property_n <= 8:
        raise ConfigurationError("property_n must be 1..8")
    return manifest


def main(argv: list[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        manifest = _manifest_from_args(args)
    except (ConfigurationError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        failed = False
        if manifest.experiment == "attack":
            rows = _attack_rows(manifest)
        elif manifest.experiment == "covert":
            rows = _covert_rows(manifest)
        elif manifest.experiment == "property":
            rows, all_passed = _property_rows(manifest)
            failed = not all_passed
        elif manifest.experiment == "trace":
            rows = _trace_rows(manifest)
        else:
            rows = _sweep_rows(manifest)
    except (ConfigurationError, TraceParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    _emit(rows, manifest)
    if failed:
        print("property check FAILED", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

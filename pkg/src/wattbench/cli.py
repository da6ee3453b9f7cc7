"""Command-line front door.

Subcommands: monitor, analyze, accuracy, predict, plot, psu.  Exit codes are
fixed for scripting: 0 success, 2 input/parse errors, 3 protocol or analysis
errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

from . import aggregate, monitor, predict, protocol, psu, svgplot
from .model import (
    AggregateReport,
    FileFormatError,
    OverlappingIntervals,
    RunManifest,
    UnpairedLabel,
    parse_events_file,
    parse_ground_truth,
    parse_power_file,
    parse_results_file,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_ANALYSIS = 3


class CliInputError(Exception):
    pass


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliInputError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _parse(path: str, parser):
    """Parse a file, turning line-level failures into path:line diagnostics."""
    text = _read(path)
    try:
        return parser(text)
    except FileFormatError as exc:
        location = f"{path}:{exc.line_no}" if exc.line_no else path
        raise CliInputError(f"{location}: {exc}") from exc
    except (UnpairedLabel, OverlappingIntervals) as exc:
        raise CliInputError(f"{path}: {exc}") from exc


def load_config(path: str) -> dict[str, str]:
    """Key/value config: register map overrides plus tool defaults."""
    values: dict[str, str] = {}
    for line_no, raw in enumerate(_read(path).split("\n"), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliInputError(f"{path}:{line_no}: expected 'key = value'")
        key, _, value = (part.strip() for part in line.partition("="))
        values[key] = value
    return values


def resolve_register_map(profile_name: str, config: dict[str, str]) -> psu.RegisterMap:
    if profile_name not in psu.PROFILES:
        raise CliInputError(
            f"unknown register profile {profile_name!r}; "
            f"available: {', '.join(sorted(psu.PROFILES))}"
        )
    register_map = psu.PROFILES[profile_name]
    overrides = {}
    for key, value in config.items():
        if key in psu._REGISTER_KEYS:
            overrides[key] = float(value) if key.endswith("_scale") else int(value, 0)
    return dataclasses.replace(register_map, **overrides) if overrides else register_map


def _config_float(config: dict[str, str], key: str, fallback: float) -> float:
    return float(config[key]) if key in config else fallback


# -- monitor ------------------------------------------------------------------


def cmd_monitor(args, config: dict[str, str]) -> int:
    register_map = resolve_register_map(args.register_profile, config)
    sampler_config = monitor.SamplerConfig(
        port_path=args.psu,
        interval=args.interval if args.interval is not None else _config_float(config, "interval", 0.1),
        out_path=args.out,
        register_profile=args.register_profile,
        live=args.live,
        unit_id=int(_config_float(config, "unit_id", 1)),
        timeout=_config_float(config, "timeout", 0.2),
        retries=int(_config_float(config, "retries", 2)),
    )
    server = None
    store = None
    if args.listen:
        store = protocol.RunStore(args.runs_dir, power_file=str(Path(args.out).resolve()))
        server = protocol.serve(args.listen, args.dataset_root, store)
        print(f"listening on {server.address[0]}:{server.address[1]}")

    handle = monitor.run_sampler(sampler_config, register_map=register_map)
    print(f"sampling {args.psu} every {sampler_config.interval}s -> {args.out}")
    try:
        if args.duration > 0:
            deadline = time.monotonic() + args.duration
            while time.monotonic() < deadline:
                time.sleep(min(0.2, max(0.0, deadline - time.monotonic())))
        else:
            while True:
                time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        if server is not None:
            server.stop()
        if store is not None:
            store.close()
        try:
            stats = handle.stop()
        except monitor.SamplerDied as exc:
            print(f"sampler died: {exc}", file=sys.stderr)
            return EXIT_ANALYSIS
    print(f"\nsamples={stats.sample_count} gaps={stats.gap_count}")
    return EXIT_OK


# -- analyze ------------------------------------------------------------------


def _parse_idle_window(spec: str) -> tuple[float, float]:
    try:
        t0, t1 = (float(part) for part in spec.split(":"))
    except ValueError as exc:
        raise CliInputError(f"bad idle window {spec!r}, expected T0:T1") from exc
    return t0, t1


def _load_run_inputs(args):
    if args.manifest:
        manifest = RunManifest.from_json(_read(args.manifest))
        base = Path(args.manifest).parent

        def resolve(name):
            return None if name is None else str((base / name) if not Path(name).is_absolute() else Path(name))

        power_path = args.power or resolve(manifest.power_file)
        events_path = args.events or resolve(manifest.events_file)
        results_path = args.results or resolve(manifest.results_file)
    else:
        if not (args.power and args.events):
            raise CliInputError("need --manifest or both --power and --events")
        power_path, events_path, results_path = args.power, args.events, args.results
        manifest = None

    if power_path is None:
        raise CliInputError("run has no power file; pass --power")
    samples = _parse(power_path, parse_power_file)
    events, intervals, _window = _parse(events_path, parse_events_file)
    if manifest is None:
        manifest = RunManifest(
            run_id=Path(events_path).stem,
            batch_count=len(intervals),
            batch_size=args.batch_size,
            device_name="",
            model_name="",
            clock_offset=0.0,
            clock_rtt=0.0,
            power_file=power_path,
            events_file=events_path,
        )
    results = None
    if results_path and Path(results_path).exists():
        parsed = _parse(results_path, parse_results_file)
        results = parsed or None
    return manifest, samples, events, results


def cmd_analyze(args, config: dict[str, str]) -> int:
    manifest, samples, events, results = _load_run_inputs(args)
    ground_truth = _parse(args.ground_truth, parse_ground_truth) if args.ground_truth else None
    idle_window = _parse_idle_window(args.idle_window) if args.idle_window else None
    report = aggregate.build_report(
        manifest,
        samples,
        events,
        results=results,
        ground_truth=ground_truth,
        idle_window=idle_window,
        label_offset=args.label_offset,
    )
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
    print_report(report)
    return EXIT_OK


def _fmt(value, unit: str, digits: int = 6) -> str:
    if value is None:
        return "n/a"
    return f"{value:.{digits}f}{unit}"


def print_report(report: AggregateReport) -> None:
    rows = [
        ("t_inf", _fmt(report.t_inf, " s")),
        ("t_mean_inf", _fmt(report.t_mean_inf, " s")),
        ("t_test", _fmt(report.t_test, " s")),
        ("w_mean_inf", _fmt(report.w_mean_inf, " W")),
        ("wm_inf", _fmt(report.wm_inf, " wattmin", digits=3)),
        ("idle_power", _fmt(report.idle_power, " W")),
        ("top1", _fmt(report.top1, "", digits=3)),
        ("top5", _fmt(report.top5, "", digits=3)),
    ]
    for name, value in rows:
        print(f"{name}: {value}")
    if report.empty_batch_count:
        print(f"empty_batches: {report.empty_batch_count}")


# -- accuracy -----------------------------------------------------------------


def cmd_accuracy(args, config: dict[str, str]) -> int:
    results = _parse(args.results, parse_results_file)
    truth = _parse(args.ground_truth, parse_ground_truth)
    ks = tuple(int(k) for k in args.ks.split(","))
    accuracies = aggregate.score_topk(results, truth, ks=ks, label_offset=args.label_offset)
    for k in sorted(accuracies):
        print(f"top{k}: {accuracies[k]:.3f}")
    return EXIT_OK


# -- predict ------------------------------------------------------------------


def _parse_rates(spec: str, limit: float) -> list[float]:
    parts = spec.split(":")
    if len(parts) not in (2, 3):
        raise CliInputError(f"bad rates spec {spec!r}, expected start:stop[:step]")
    start = float(parts[0])
    stop = limit if parts[1] == "max" else float(parts[1])
    stop = min(stop, limit)
    if len(parts) == 3:
        step = float(parts[2])
        if step <= 0:
            raise CliInputError("rates step must be positive")
    else:
        step = (stop - start) / 200 or 1.0
    rates = []
    k = 0
    while True:
        rate = start + k * step
        if rate > stop + 1e-9:
            break
        rates.append(min(rate, stop))
        k += 1
    return rates


def cmd_predict(args, config: dict[str, str]) -> int:
    try:
        profiles = [predict.load_profile(path) for path in args.profile]
    except OSError as exc:
        raise CliInputError(f"cannot read profile: {exc}") from exc
    except ValueError as exc:
        raise CliInputError(str(exc)) from exc

    if args.mode == "crossover":
        if len(profiles) < 2:
            raise CliInputError("crossover needs two --profile files")
        status = EXIT_OK
        for i, a in enumerate(profiles):
            for b in profiles[i + 1 :]:
                rate = predict.crossover(a, b)
                if rate is None:
                    print(f"{a.name} / {b.name}: no crossover")
                else:
                    busy_a = predict.busy_fraction(a, rate)
                    busy_b = predict.busy_fraction(b, rate)
                    print(
                        f"{a.name} / {b.name}: {rate:.1f} inf/min "
                        f"(busy {busy_a * 100:.1f}% / {busy_b * 100:.1f}%)"
                    )
        return status

    limit = min(predict.rate_limit(p) for p in profiles)
    rates = _parse_rates(args.rates, limit)
    columns = ["rate_per_min"]
    for p in profiles:
        columns.append(f"{p.name}_wm_per_min")
        columns.append(f"{p.name}_busy_fraction")
    lines = ["# " + ",".join(columns)]
    per_profile = {p.name: predict.RatePowerCurve(p).sample(rates) for p in profiles}
    for i, rate in enumerate(rates):
        cells = [f"{rate:.6f}"]
        for p in profiles:
            _, energy, busy = per_profile[p.name][i]
            cells.append(f"{energy:.6f}")
            cells.append(f"{busy:.6f}")
        lines.append(",".join(cells))
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    for p in profiles:
        print(
            f"{p.name}: max {predict.max_rate(p)} inf/min, "
            f"E(0)={p.w_idle:.3f}, E(max)={p.w_mean_inf:.3f} wattmin/min"
        )
    print(f"wrote {args.out} ({len(rates)} rates, {len(profiles)} profiles)")

    if args.figure:
        from .figures import render_rate_power_figure

        render_rate_power_figure(
            profiles, {p.name: rates for p in profiles}, args.figure
        )
        print(f"wrote {args.figure}")
    return EXIT_OK


# -- plot ---------------------------------------------------------------------


def cmd_plot(args, config: dict[str, str]) -> int:
    spec = svgplot.PlotSpec(
        power_file=args.power,
        events_file=args.events,
        out=args.out,
        format=args.format,
        annotate=not args.no_annotate,
        timestamp=not args.no_timestamp,
    )
    samples = _parse(spec.power_file, parse_power_file)
    intervals, window = [], None
    if spec.events_file:
        _events, intervals, window = _parse(spec.events_file, parse_events_file)
    try:
        if spec.format == "svg":
            content = svgplot.render_svg(
                samples,
                intervals,
                window,
                annotate=spec.annotate,
                timestamp="auto" if spec.timestamp else None,
            )
        else:
            content = svgplot.render_csv_series(samples, intervals, window)
    except svgplot.EmptyTrace as exc:
        raise CliInputError(str(exc)) from exc
    Path(spec.out).write_text(content, encoding="utf-8")
    print(f"wrote {spec.out}")
    return EXIT_OK


# -- psu ----------------------------------------------------------------------


def cmd_psu(args, config: dict[str, str]) -> int:
    register_map = resolve_register_map(args.register_profile, config)
    timeout = _config_float(config, "timeout", 0.2)
    unit_id = int(_config_float(config, "unit_id", 1))
    port = psu.open_port(args.psu)
    try:
        if args.psu_op == "read":
            values = psu.read_registers(
                port, args.reg, args.count, unit_id=unit_id, timeout=timeout
            )
            for i, value in enumerate(values):
                print(f"{args.reg + i:#06x}: {value} ({value:#06x})")
        elif args.psu_op == "write":
            psu.write_register(
                port, args.reg, args.value, unit_id=unit_id, timeout=timeout
            )
            print(f"wrote {args.value} to {args.reg:#06x}")
        elif args.psu_op == "measure":
            sample = psu.read_measurements(
                port, register_map, unit_id=unit_id, timeout=timeout
            )
            print(
                f"{sample.t:.6f}: {sample.voltage:.3f} V  {sample.current:.3f} A  "
                f"{sample.power:.3f} W"
            )
        elif args.psu_op == "output":
            psu.set_output(
                port, register_map, args.state == "on", unit_id=unit_id, timeout=timeout
            )
            print(f"output {args.state}")
    finally:
        port.close()
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


def _int_maybe_hex(text: str) -> int:
    return int(text, 0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wattbench",
        description="Measure inference latency, power and energy on devices under test.",
    )
    parser.add_argument("--config", help="key/value config file (register map, defaults)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("monitor", help="sample the PSU and host the agent server")
    p.add_argument("--psu", required=True, help="serial device path or sim: spec")
    p.add_argument("--interval", type=float, default=None, help="sampling interval [s]")
    p.add_argument("--out", required=True, help="power CSV output path")
    p.add_argument("--listen", help="host:port for the agent server")
    p.add_argument("--dataset-root", default=".", help="directory served to agents")
    p.add_argument("--runs-dir", default="runs", help="directory for per-run files")
    p.add_argument("--live", action="store_true", help="print a rolling last-sample line")
    p.add_argument("--duration", type=float, default=0.0, help="stop after N seconds (0: run until interrupted)")
    p.add_argument("--register-profile", default="hm310p-community")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("analyze", help="build the aggregate report for a run")
    p.add_argument("--manifest", help="manifest.json written by the monitor")
    p.add_argument("--power", help="power CSV (overrides manifest)")
    p.add_argument("--events", help="events CSV (overrides manifest)")
    p.add_argument("--results", help="results CSV (overrides manifest)")
    p.add_argument("--ground-truth", help="ground truth file: sample_id label_index")
    p.add_argument("--idle-window", help="idle window T0:T1 on the power timeline")
    p.add_argument("--label-offset", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=1, help="batch size when no manifest is given")
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("accuracy", help="score top-k accuracy for a results file")
    p.add_argument("--results", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--ks", default="1,5")
    p.add_argument("--label-offset", type=int, default=0)
    p.set_defaults(func=cmd_accuracy)

    p = sub.add_parser("predict", help="predict energy per minute over inference rate")
    p.add_argument("mode", nargs="?", choices=["curve", "crossover"], default="curve")
    p.add_argument("--profile", action="append", required=True, help="device profile file (repeatable)")
    p.add_argument("--rates", default="0:max", help="rate grid start:stop[:step]; stop may be 'max'")
    p.add_argument("--out", default="curve.csv", help="curve CSV output path")
    p.add_argument("--figure", help="also render the curves to this image file")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("plot", help="render a power trace with inference bands")
    p.add_argument("--power", required=True)
    p.add_argument("--events", help="events CSV for interval bands")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["svg", "csv-series"], default="svg")
    p.add_argument("--no-annotate", action="store_true")
    p.add_argument("--no-timestamp", action="store_true", help="omit the generation timestamp (byte-reproducible output)")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("psu", help="manual register access for bring-up")
    psub = p.add_subparsers(dest="psu_op", required=True)
    for name in ("read", "write", "measure", "output"):
        sp = psub.add_parser(name)
        sp.add_argument("--psu", required=True, help="serial device path or sim: spec")
        sp.add_argument("--register-profile", default="hm310p-community")
        if name == "read":
            sp.add_argument("--reg", type=_int_maybe_hex, required=True)
            sp.add_argument("--count", type=int, default=1)
        elif name == "write":
            sp.add_argument("--reg", type=_int_maybe_hex, required=True)
            sp.add_argument("--value", type=_int_maybe_hex, required=True)
        elif name == "output":
            sp.add_argument("state", choices=["on", "off"])
        sp.set_defaults(func=cmd_psu)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = load_config(args.config) if args.config else {}
    try:
        return args.func(args, config)
    except CliInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (
        aggregate.AllBatchesEmpty,
        aggregate.ManifestMismatch,
        aggregate.MissingGroundTruth,
        aggregate.TopKTooShort,
        predict.RateExceedsMax,
        monitor.WindowTooSparse,
        monitor.WindowOverlapsInference,
        psu.PsuError,
        protocol.ProtocolError,
        protocol.AddressInUse,
        protocol.ServerError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    except json.JSONDecodeError as exc:
        print(f"error: bad JSON input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

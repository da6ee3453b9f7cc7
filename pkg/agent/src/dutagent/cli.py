"""dut-agent command line: run one benchmark workload against a monitor."""

from __future__ import annotations

import argparse
import socket
import sys
from pathlib import Path

from .backends import BackendLoadError, load_backend
from .wire import ConnectFailed, MonitorClient, MonitorError, WireError
from .workload import WorkloadSpec, run_workload


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dut-agent",
        description="Run an inference workload against a wattbench monitor.",
    )
    parser.add_argument("--connect", required=True, help="monitor host:port")
    parser.add_argument("--run-id", required=True)
    parser.add_argument(
        "--backend",
        default="stub:sleep:0.05",
        help="stub:sleep:<seconds>, identity, or module:callable",
    )
    parser.add_argument("--batches", type=int, required=True, help="number of batches N")
    parser.add_argument("--batch-size", type=int, default=1)
    parser.add_argument(
        "--repeat",
        action="store_true",
        help="reuse the first batch of samples for every batch",
    )
    parser.add_argument(
        "--dataset-manifest",
        help="file listing one sample id (monitor-relative path) per line",
    )
    parser.add_argument("--device", default=socket.gethostname())
    parser.add_argument("--model", default=None, help="model name (default: backend id)")
    parser.add_argument("--topk", type=int, default=5)
    parser.add_argument("--label-offset", type=int, default=0)
    parser.add_argument("--probes", type=int, default=8, help="clock sync probe count")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    manifest: list[str] = []
    if args.dataset_manifest:
        try:
            text = Path(args.dataset_manifest).read_text(encoding="utf-8")
        except OSError as exc:
            print(f"error: cannot read {args.dataset_manifest}: {exc}", file=sys.stderr)
            return 2
        manifest = [line.strip() for line in text.splitlines() if line.strip()]

    try:
        spec = WorkloadSpec(
            run_id=args.run_id,
            backend=args.backend,
            batch_count=args.batches,
            batch_size=args.batch_size,
            dataset_manifest=manifest,
            repeat_samples=args.repeat,
            topk=args.topk,
            label_offset=args.label_offset,
        )
        backend = load_backend(spec.backend)
    except (ValueError, BackendLoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        with MonitorClient.connect(args.connect) as client:
            sync = client.sync(probes=args.probes)
            print(
                f"synced: offset {sync.offset * 1e3:+.3f} ms, "
                f"rtt {sync.rtt * 1e3:.3f} ms, "
                f"dispersion {sync.dispersion * 1e3:.3f} ms"
            )
            client.hello(
                spec.run_id,
                device=args.device,
                model=args.model or spec.backend,
                batch_count=spec.batch_count,
                batch_size=spec.batch_size,
            )
            sent = run_workload(spec, client, backend)
            batches = client.end_run()
            print(f"run {spec.run_id}: {batches} batches recorded, {sent} results sent")
    except (ConnectFailed, MonitorError, WireError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""The `dart` command line: run programs under capture, inspect stores,
restore/resume/replay past states, diff versions, replicate via packs,
and run the bench workloads.

Exit codes: 0 success, 1 program (VM/parse) failure, 2 usage errors,
3 store lock conflicts. Capture-side failures never change the exit code.
"""

from __future__ import annotations

import argparse
import base64
import json
import sys
from pathlib import Path

from . import bench as benchmod
from . import lang
from .capture import CaptureConfig, EveryKStatements, EveryTMillis, FaultPlan, run_with_capture
from .errors import DartError, ParseError, StoreLocked, VMError
from .heap import BLOB, LIST, Ref
from .recovery import diff_versions, materialize, replay_to_statement, resume
from .store import RT_CHECKPOINT, Store, export_pack, import_pack

EXIT_OK = 0
EXIT_PROGRAM = 1
EXIT_USAGE = 2
EXIT_LOCKED = 3


def _capture_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--every-statements", type=int, metavar="K")
    group.add_argument("--every-millis", type=int, metavar="T")
    p.add_argument("--strategy", choices=["serial", "idgraph", "auto"], default="auto")
    p.add_argument("--budget", type=float, metavar="RHO",
                   help="overhead budget in (0,1]; enables adaptive sampling")
    p.add_argument("--checkpoint-every", type=int, default=16, metavar="N")
    p.add_argument("--queue-depth", type=int, default=4)
    p.add_argument("--fsync", choices=["always", "batch"], default="always")
    p.add_argument("--inject-fault", metavar="SPEC",
                   help="e.g. serialize:0.5 or serialize:0.3,store:0.2")
    p.add_argument("--inject-seed", type=int, default=0)
    p.add_argument("--fingerprints", action="store_true",
                   help="record a state fingerprint per snapshot (slower)")


def _parse_fault_spec(spec: str | None, seed: int) -> FaultPlan | None:
    if not spec:
        return None
    plan = FaultPlan(seed=seed)
    for part in spec.split(","):
        name, _, prob = part.partition(":")
        try:
            p = float(prob)
        except ValueError:
            raise DartError(f"bad fault spec {part!r}") from None
        if name == "serialize":
            plan.serialize_p = p
        elif name == "store":
            plan.store_p = p
        else:
            raise DartError(f"unknown fault target {name!r}")
    return plan


def _build_config(args) -> CaptureConfig:
    if args.every_millis is not None:
        trigger = EveryTMillis(args.every_millis)
    else:
        trigger = EveryKStatements(args.every_statements or 10)
    return CaptureConfig(
        trigger=trigger,
        strategy=args.strategy,
        overhead_budget=args.budget,
        checkpoint_every=args.checkpoint_every,
        queue_depth=args.queue_depth,
        record_fingerprints=args.fingerprints,
        faults=_parse_fault_spec(args.inject_fault, args.inject_seed),
        fsync=args.fsync,
    )


def render_value(heap, value, seen=None):
    """JSON-friendly rendering; blobs summarized, repeated objects become
    {"ref": oid} so cycles terminate."""
    if seen is None:
        seen = set()
    if type(value) is not Ref:
        return value
    oid = value.oid
    if oid in seen:
        return {"ref": oid}
    seen.add(oid)
    node = heap.node(oid)
    if node.kind == LIST:
        return [render_value(heap, v, seen) for v in node.data]
    if node.kind == BLOB:
        head = base64.b16encode(bytes(node.data[:8])).decode().lower()
        return {"blob_len": len(node.data), "head": head}
    return {k: render_value(heap, v, seen) for k, v in node.data.items()}


def _find_root(state_frames, name: str):
    for fname, bindings, _cursor in reversed(state_frames):
        if name in bindings:
            return bindings[name]
    return None


# --- subcommands -------------------------------------------------------------

def _cmd_run(args) -> int:
    path = Path(args.program)
    if not path.is_file():
        print(f"error: program file {path} not found", file=sys.stderr)
        return EXIT_USAGE
    source = path.read_text()
    config = _build_config(args)
    outcome = run_with_capture(source, args.seed, args.store, config)
    persisted = outcome.persisted_versions
    latest = persisted[-1] if persisted else None
    if args.json:
        print(json.dumps({
            "persisted_versions": len(persisted),
            "latest_version": latest,
            "statements": outcome.vm.statement_index,
            "error": str(outcome.error) if outcome.error else None,
        }))
    else:
        print(f"persisted {len(persisted)} versions"
              + (f" (latest v{latest})" if latest else "")
              + f" after {outcome.vm.statement_index} statements -> {args.store}")
        if outcome.error is not None:
            print(f"program failed: {outcome.error}", file=sys.stderr)
    return EXIT_PROGRAM if outcome.error is not None else EXIT_OK


def _cmd_log(args) -> int:
    store = Store(args.store, require_checkpoint=False)
    rows = [{
        "version": v,
        "statement_index": store.index[v].statement_index,
        "kind": "checkpoint" if store.index[v].kind == RT_CHECKPOINT else "delta",
        "bytes": store.index[v].length,
        "base_version": store.index[v].base_version,
    } for v in store.versions]
    if args.json:
        print(json.dumps(rows, indent=1))
    else:
        print(f"{'version':>8} {'stmt':>8} {'kind':>10} {'bytes':>12} {'base':>8}")
        for r in rows:
            base = "-" if r["base_version"] is None else r["base_version"]
            print(f"{r['version']:>8} {r['statement_index']:>8} {r['kind']:>10} "
                  f"{r['bytes']:>12} {base:>8}")
        if store.corrupt:
            print(f"warning: {len(store.corrupt)} corrupt record(s): {store.corrupt}",
                  file=sys.stderr)
    return EXIT_OK


def _cmd_restore(args) -> int:
    if args.resume:
        config = _build_config(args) if args.every_statements or args.every_millis else None
        vm = resume(args.store, args.version, capture_config=config)
        print(f"resumed from v{args.version}, finished at statement "
              f"{vm.statement_index}")
        if args.inspect:
            value = _find_root([(f.function_name, f.bindings, None) for f in vm.frames],
                               args.inspect)
            print(json.dumps(render_value(vm.heap, value)))
        return EXIT_OK
    state = materialize(args.store, args.version).state
    if args.inspect:
        value = _find_root(state.frames, args.inspect)
        if value is None and not any(args.inspect in b for _, b, _ in state.frames):
            print(f"error: no root named {args.inspect!r} at v{args.version}",
                  file=sys.stderr)
            return EXIT_USAGE
        print(json.dumps(render_value(state.heap, value)))
        return EXIT_OK
    summary = {
        "version": args.version,
        "statement_index": state.statement_index,
        "frames": [{"function": fname, "bindings": list(bindings)}
                   for fname, bindings, _ in state.frames],
        "objects": len(state.heap.objects),
        "fingerprint": state.fingerprint().hex(),
    }
    if args.json:
        print(json.dumps(summary, indent=1))
    else:
        print(f"v{args.version}: statement {state.statement_index}, "
              f"{len(state.heap.objects)} objects, "
              f"fingerprint {summary['fingerprint']}")
        for f in summary["frames"]:
            print(f"  frame {f['function']}: {', '.join(f['bindings']) or '(empty)'}")
    return EXIT_OK


def _cmd_replay(args) -> int:
    vm = replay_to_statement(args.store, args.statement)
    if args.inspect:
        value = _find_root([(f.function_name, f.bindings, None) for f in vm.frames],
                           args.inspect)
        print(json.dumps(render_value(vm.heap, value)))
        return EXIT_OK
    out = {
        "statement_index": vm.statement_index,
        "fingerprint": vm.state_fingerprint().hex(),
        "objects": len(vm.heap.objects),
    }
    if args.json:
        print(json.dumps(out, indent=1))
    else:
        print(f"statement {out['statement_index']}: {out['objects']} objects, "
              f"fingerprint {out['fingerprint']}")
    return EXIT_OK


def _cmd_diff(args) -> int:
    report = diff_versions(args.store, args.v1, args.v2)
    if args.json:
        print(report.to_json())
    else:
        print(report.to_text(), end="")
    return EXIT_OK


def _cmd_export(args) -> int:
    store = Store(args.store)
    hi = args.to if args.to is not None else store.latest_version
    lo = getattr(args, "from") if getattr(args, "from") is not None else hi
    count = export_pack(store, args.out, lo, hi)
    print(f"exported {count} records covering v{lo}..v{hi} -> {args.out}")
    return EXIT_OK


def _cmd_import(args) -> int:
    store = import_pack(args.pack, args.store)
    print(f"imported {len(store.versions)} versions into {args.store} "
          f"(latest v{store.latest_version})")
    return EXIT_OK


def _cmd_bench(args) -> int:
    workdir = args.workdir
    if args.workload == "sweep":
        rows = benchmod.sweep_volatility(
            [float(x) for x in args.p_grid.split(",")],
            args.objects, args.object_kib * 1024, args.iters, workdir,
            seed=args.seed)
        print(json.dumps(rows, indent=1))
        return EXIT_OK
    if args.workload == "static-plus-model":
        spec = benchmod.static_plus_model(
            args.dataset_mib * 1024 * 1024, args.model_mib * 1024 * 1024,
            args.iters, args.seed)
    elif args.workload == "shuffle":
        spec = benchmod.shuffle(args.items, args.item_kib * 1024, args.iters,
                                args.seed)
    elif args.workload == "volatility":
        spec = benchmod.volatility(args.objects, args.object_kib * 1024, args.p,
                                   args.iters, args.seed)
    else:
        spec = benchmod.deep_update(args.model_mib * 1024 * 1024, args.iters,
                                    args.seed)
    config = CaptureConfig(trigger=EveryKStatements(spec.stmts_per_iter),
                           strategy=args.strategy, fsync=args.fsync)
    report = benchmod.run_bench(spec, config, args.reps, workdir)
    if args.out:
        Path(args.out).write_text(report.to_json())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    print(report.to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dart",
        description="Durable transactional state engine for DartScript programs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a program with capture enabled")
    p.add_argument("program")
    p.add_argument("--store", required=True)
    p.add_argument("--json", action="store_true")
    _capture_flags(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("log", help="list persisted versions")
    p.add_argument("store")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_log)

    p = sub.add_parser("restore", help="materialize or resume a past version")
    p.add_argument("store")
    p.add_argument("--version", type=int, required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--inspect", metavar="NAME")
    p.add_argument("--json", action="store_true")
    _capture_flags(p)
    p.set_defaults(func=_cmd_restore)

    p = sub.add_parser("replay", help="reconstruct the state after statement I")
    p.add_argument("store")
    p.add_argument("--statement", type=int, required=True)
    p.add_argument("--inspect", metavar="NAME")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("diff", help="compare two persisted versions")
    p.add_argument("store")
    p.add_argument("v1", type=int)
    p.add_argument("v2", type=int)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_diff)

    p = sub.add_parser("export", help="export versions into a replication pack")
    p.add_argument("store")
    p.add_argument("--out", required=True)
    p.add_argument("--from", type=int, dest="from")
    p.add_argument("--to", type=int)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("import", help="build a fresh store from a pack")
    p.add_argument("pack")
    p.add_argument("--store", required=True)
    p.set_defaults(func=_cmd_import)

    p = sub.add_parser("bench", help="run a synthetic workload benchmark")
    p.add_argument("workload", choices=["static-plus-model", "shuffle",
                                        "volatility", "deep-update", "sweep"])
    p.add_argument("--dataset-mib", type=int, default=8)
    p.add_argument("--model-mib", type=int, default=1)
    p.add_argument("--items", type=int, default=32)
    p.add_argument("--item-kib", type=int, default=64)
    p.add_argument("--objects", type=int, default=32)
    p.add_argument("--object-kib", type=int, default=32)
    p.add_argument("--p", type=float, default=0.1)
    p.add_argument("--p-grid", default="0,0.05,0.25,0.5,1.0")
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--strategy", choices=["serial", "idgraph", "auto"],
                   default="auto")
    p.add_argument("--fsync", choices=["always", "batch"], default="batch")
    p.add_argument("--workdir", default="bench-work")
    p.add_argument("--out", metavar="REPORT_JSON")
    p.add_argument("--csv", metavar="REPORT_CSV")
    p.set_defaults(func=_cmd_bench)

    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StoreLocked as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_LOCKED
    except (ParseError, VMError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PROGRAM
    except DartError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()

"""vic-sim command line: run scenarios, diff reports, export offsets, serve QMP."""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from .anticheat import HypervisorProfile
from .cheats import FrameLog
from .errors import VicSimError
from .game import GameConfig, ToyGame, export_offsets
from .harness import SCENARIOS, Scenario, diff_report, load_report, run_scenario, summary_table
from .input_channel import qmp_serve
from .paging import GuestMemory
from .slat_events import CostModel


def _mitigations(text: str) -> tuple:
    return tuple(m for m in (part.strip() for part in text.split(",")) if m) if text else ()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vic-sim", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and write a report")
    run.add_argument("--scenario", required=True, choices=SCENARIOS)
    run.add_argument("--players", type=int, default=24)
    run.add_argument("--seed", type=int, default=7)
    run.add_argument("--session-secs", type=int, default=600)
    run.add_argument("--reps", type=int, default=3)
    run.add_argument("--mitigations", default="", help="comma list of huge_pages,colocate,encrypt")
    run.add_argument("--spp", action="store_true", help="sub-page protection for the event trigger-bot")
    run.add_argument("--report", type=Path, help="report file to write")
    run.add_argument("--overlay-log", type=Path, help="frame log of the first repetition")
    run.add_argument("--poll-ms", type=float, default=16.0)
    run.add_argument("--vmexit-us", type=float, default=CostModel.vmexit_cost_us)
    run.add_argument("--baseline-us", type=float, default=CostModel.baseline_access_cost_us)
    run.add_argument("--tsc-offset", action="store_true", help="hypervisor hides vmexit time from the guest clock")
    run.add_argument("--vmread-succeeds", action="store_true", help="hypervisor lets vmread run instead of #UD")
    run.add_argument("--unsafe-memory-fire", action="store_true", help="trigger-bot writes the fire flag directly")

    diff = sub.add_parser("diff", help="baseline minus cheat statistics")
    diff.add_argument("--baseline", required=True, type=Path)
    diff.add_argument("--cheat", required=True, type=Path)

    off = sub.add_parser("offsets", help="write the game's offsets file")
    off.add_argument("--out", required=True, type=Path)
    off.add_argument("--players", type=int, default=24)
    off.add_argument("--mitigations", default="")
    off.add_argument("--no-crosshair", action="store_true", help="omit the crosshair address")

    qmp = sub.add_parser("qmp-serve", help="serve the input channel of a live game")
    qmp.add_argument("--endpoint", required=True, help="unix socket path or tcp:host:port")
    qmp.add_argument("--seconds", type=float, default=0.0, help="stop after this many wall seconds (0: forever)")

    summ = sub.add_parser("summary", help="quartile table of reports against a baseline")
    summ.add_argument("--baseline", required=True, type=Path)
    summ.add_argument("reports", nargs="+", type=Path)
    return p


def cmd_run(args) -> int:
    scenario = Scenario(
        name=args.scenario, players=args.players, seed=args.seed, mitigations=_mitigations(args.mitigations),
        session_seconds=args.session_secs, repetitions=args.reps, spp=args.spp, poll_interval_ms=args.poll_ms,
        unsafe_memory_fire=args.unsafe_memory_fire,
        cost=CostModel(args.vmexit_us, args.baseline_us),
        profile=HypervisorProfile(args.tsc_offset, not args.vmread_succeeds),
    )
    sink = FrameLog(args.overlay_log) if args.overlay_log else None
    try:
        report = run_scenario(scenario, overlay_sink=sink)
    finally:
        if sink is not None:
            sink.close()
    if args.report:
        report.save(args.report)
    print(f"{scenario.name}: mean rate {report.mean_rate:.3f} ticks/s, "
          f"{report.mean_events_per_second:.3f} events/s, probes {report.verdict}")
    return 0


def cmd_diff(args) -> int:
    stats = diff_report(load_report(args.cheat), load_report(args.baseline))
    print(json.dumps(stats.to_dict()))
    return 0


def cmd_offsets(args) -> int:
    config = Scenario("benchmark", players=args.players, mitigations=_mitigations(args.mitigations)).game_config()
    if args.no_crosshair:
        config = replace(config, expose_crosshair=False)
    game = ToyGame(GuestMemory(), config)
    export_offsets(game.layout, args.out)
    return 0


def cmd_qmp_serve(args) -> int:
    game = ToyGame(GuestMemory(), GameConfig())
    server = qmp_serve(args.endpoint, game.channel)
    print(f"listening on {args.endpoint}", flush=True)
    deadline = time.monotonic() + args.seconds if args.seconds > 0 else None
    try:
        while deadline is None or time.monotonic() < deadline:
            game.step()
            for ev in game.last_tick_inputs:
                detail = list(ev.detail) if isinstance(ev.detail, tuple) else ev.detail
                print(json.dumps({"tick": game.tick - 1, "device": ev.device.value,
                                  "action": ev.action.value, "detail": detail}), flush=True)
            time.sleep(game.config.dt)
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return 0


def cmd_summary(args) -> int:
    baseline = load_report(args.baseline)
    print(summary_table([load_report(p) for p in args.reports], baseline))
    return 0


COMMANDS = {"run": cmd_run, "diff": cmd_diff, "offsets": cmd_offsets, "qmp-serve": cmd_qmp_serve,
            "summary": cmd_summary}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (VicSimError, ValueError, OSError) as exc:
        print(f"vic-sim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

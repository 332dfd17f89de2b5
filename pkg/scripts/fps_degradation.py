"""Tick-rate loss of each cheat against the cheat-free benchmark.

    python3 scripts/fps_degradation.py --out results/ --session-secs 600 --reps 3
"""
import argparse
import time
from pathlib import Path

from vicsim.harness import SCENARIOS, Scenario, diff_report, run_scenario, summary_table


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("results"))
    p.add_argument("--players", type=int, default=24)
    p.add_argument("--session-secs", type=int, default=600)
    p.add_argument("--reps", type=int, default=3)
    args = p.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    reports = {}
    for name in SCENARIOS:
        start = time.perf_counter()
        scenario = Scenario(name, players=args.players, session_seconds=args.session_secs, repetitions=args.reps)
        reports[name] = run_scenario(scenario)
        reports[name].save(args.out / f"{name}.json")
        print(f"{name:<22} {reports[name].mean_rate:8.3f} ticks/s  ({time.perf_counter() - start:.1f}s)")

    base = reports["benchmark"]
    print()
    print(summary_table([reports[n] for n in SCENARIOS[1:]], base))
    loss = {n: diff_report(reports[n], base).mean for n in SCENARIOS[1:]}
    order = sorted(loss, key=loss.get)
    print("\nordering by mean loss:", " <= ".join(order))


if __name__ == "__main__":
    main()

"""Events per second seen by the event trigger-bot as the lobby grows.

    python3 scripts/player_correlation.py --players 4 8 16 24 32
"""
import argparse

from vicsim.harness import Scenario, events_per_player_correlation, run_scenario, with_players


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--players", type=int, nargs="+", default=[4, 8, 16, 24, 32])
    p.add_argument("--session-secs", type=int, default=600)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--spp", action="store_true")
    args = p.parse_args()

    base = Scenario("triggerbot_event", session_seconds=args.session_secs, repetitions=args.reps, spp=args.spp)
    reports = []
    for n in args.players:
        r = run_scenario(with_players(base, n))
        reports.append(r)
        print(f"{n:>3} players: {r.mean_events_per_second:10.2f} events/s  {r.mean_rate:7.3f} ticks/s")
    print("verdict:", events_per_player_correlation(reports).verdict)


if __name__ == "__main__":
    main()

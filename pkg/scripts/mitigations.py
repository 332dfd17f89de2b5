"""Defender-side knobs: event surface of a crosshair watch and radar accuracy.

    python3 scripts/mitigations.py
"""
import argparse

from vicsim.game import GameConfig
from vicsim.harness import irrelevant_events_per_tick, radar_position_error

LAYOUTS = {
    "none": {},
    "huge_pages": {"huge_pages": True},
    "colocate_code_data": {"colocate_code_data": True},
    "both": {"huge_pages": True, "colocate_code_data": True},
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--players", type=int, default=24)
    p.add_argument("--seconds", type=int, default=60, help="radar session length")
    args = p.parse_args()

    print("irrelevant events per tick for one crosshair watch")
    for name, flags in LAYOUTS.items():
        cfg = GameConfig(players=args.players, **flags)
        spp = "n/a" if cfg.huge_pages else f"{irrelevant_events_per_tick(cfg, use_spp=True):.1f}"
        print(f"  {name:<20} {irrelevant_events_per_tick(cfg):6.1f}   with SPP: {spp}")

    print("\nradar mean position error (world units)")
    for enc in (False, True):
        err = radar_position_error(GameConfig(players=args.players, memory_encryption=enc), seconds=args.seconds)
        print(f"  memory_encryption={enc!s:<5} {err:10.1f}")


if __name__ == "__main__":
    main()

import os

import pytest
from hypothesis import HealthCheck, settings

from vicsim.game import GameConfig, EntityScript, ToyGame
from vicsim.paging import GuestMemory
from vicsim.slat_events import CostModel

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def guest():
    return GuestMemory(ram_bytes=16 << 20)


@pytest.fixture
def game():
    return ToyGame(GuestMemory(), GameConfig(), 7)


def static_scene(*entities, **overrides):
    """Config with parked entities and a camera that does not turn.

    ``entities`` are (team, (x, y, z)) pairs; the camera sits at the origin
    looking down +x.
    """
    scripts = tuple(EntityScript(team, (pos,), 0.0) for team, pos in entities)
    base = dict(scripts=scripts, local_yaw_rate_dps=0.0)
    base.update(overrides)
    return GameConfig(**base)


def free_cost():
    return CostModel(vmexit_cost_us=0.0, baseline_access_cost_us=0.0)


def crosshair_oracle(positions, alive, view_proj, config):
    """Brute-force ray through the screen centre: nearest alive box that holds it."""
    from vicsim.geometry import world_to_screen

    cx, cy = config.screen[0] / 2, config.screen[1] / 2
    best = (float("inf"), -1)
    for i, (pos, live) in enumerate(zip(positions, alive)):
        if not live:
            continue
        pos = [float(v) for v in pos]
        feet = world_to_screen(pos, view_proj, config.screen)
        head = world_to_screen([pos[0], pos[1], pos[2] + config.entity_height], view_proj, config.screen)
        if feet is None or head is None:
            continue
        top, bottom = sorted((feet[1], head[1]))
        half = (bottom - top) * config.entity_width / config.entity_height / 2
        mid = (feet[0] + head[0]) / 2
        if mid - half <= cx <= mid + half and top <= cy <= bottom:
            depth = sum(view_proj[3][j] * v for j, v in enumerate(pos + [1.0]))
            best = min(best, (depth, i))
    return best[1]

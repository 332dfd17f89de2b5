"""Radar, wall-hack and trigger-bot, built only on host reads and input injection.

The runtime has the usual two-task shape: a reader task copies game state out
of guest memory into an immutable snapshot every poll interval, and an
overlay task renders the latest snapshot into a frame sink.  Only the reader
touches guest memory.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import geometry
from .errors import StaleOffsets
from .game import ENTITY_DTYPE, LOCAL_PLAYER, PROCESS_NAME, TEAM_ENEMY, GameLayout
from .input_channel import InputChannel, InputEvent
from .vmi import VmiSession, WatchHandle, read_exact

U32 = struct.Struct("<I")
I32 = struct.Struct("<i")
U64 = struct.Struct("<Q")

CHEAT_KINDS = ("radar", "wallhack", "triggerbot_poll", "triggerbot_event")
RADAR_SIZE = (256, 256)
SCREEN = (1280, 720)
TEAM_NAMES = {TEAM_ENEMY: "enemy"}
TEAM_COLORS = {TEAM_ENEMY: "red"}


def team_name(team: int) -> str:
    return TEAM_NAMES.get(int(team), "ally")


def team_color(team: int) -> str:
    return TEAM_COLORS.get(int(team), "blue")


# -- snapshots --------------------------------------------------------------

@dataclass(frozen=True)
class GameSnapshot:
    """Game state as copied out by the reader; arrays are read-only."""

    tick: int
    local_pos: tuple
    view_proj: np.ndarray
    entities: np.ndarray
    crosshair: Optional[int]

    def __post_init__(self):
        self.view_proj.flags.writeable = False
        self.entities.flags.writeable = False


def _empty_entities() -> np.ndarray:
    return np.zeros(0, dtype=ENTITY_DTYPE)


def read_snapshot(session: VmiSession, layout: GameLayout, process_name: str = PROCESS_NAME) -> GameSnapshot:
    """Assemble a snapshot, trusting nothing read from the guest.

    The entity count is clamped to ``max_entities`` and an entity pointer that
    does not resolve yields an empty entity list rather than an error.  Only
    the header itself failing to read means the offsets are stale.
    """
    def must(key: str, n: int) -> bytes:
        raw = read_exact(session, process_name, layout.addr(key), n)
        if raw is None:
            raise StaleOffsets(f"{key} at {layout.addr(key):#x} is not mapped")
        return raw

    ptr = U64.unpack(must("entity_list_addr", 8))[0]
    count = min(U32.unpack(must("entity_count", 4))[0], layout.max_entities)
    x, y, z, *_ = LOCAL_PLAYER.unpack(must("local_player", LOCAL_PLAYER.size))
    with np.errstate(invalid="ignore"):  # ciphertext may decode to signalling NaNs
        vp = np.frombuffer(must("view_proj_matrix", 64), dtype="<f4").astype(float).reshape(4, 4)
    crosshair = None
    if layout.crosshair_entity is not None:
        crosshair = I32.unpack(must("crosshair_entity", 4))[0]
    ents = _empty_entities()
    if count:
        raw = read_exact(session, process_name, ptr, count * layout.entity_stride)
        if raw is not None:
            ents = np.frombuffer(raw, dtype=ENTITY_DTYPE).copy()
    return GameSnapshot(session.now, (x, y, z), vp, ents, crosshair)


# -- radar ------------------------------------------------------------------

@dataclass(frozen=True)
class RadarFrame:
    tick: int
    width: int
    height: int
    dots: tuple  # (entity id, x, y, team)

    kind = "radar"

    def shapes(self) -> list:
        return [{"id": i, "x": x, "y": y, "team": team_name(t)} for i, x, y, t in self.dots]


def radar_affine(world_xy, map_half_extent: float, radar=RADAR_SIZE, mode: str = "absolute",
                 player_xy=(0.0, 0.0)) -> tuple[float, float]:
    """Unclamped radar coordinates; y is flipped so world +y is radar up."""
    if map_half_extent <= 0:
        raise ValueError("map_half_extent must be positive")
    x, y = float(world_xy[0]), float(world_xy[1])
    if mode == "player_relative":
        x -= player_xy[0]
        y -= player_xy[1]
    elif mode != "absolute":
        raise ValueError(f"unknown radar mode {mode!r}")
    span = 2.0 * map_half_extent
    return (x + map_half_extent) / span * radar[0], (map_half_extent - y) / span * radar[1]


def radar_project(world_xy, map_half_extent: float, radar=RADAR_SIZE, mode: str = "absolute",
                  player_xy=(0.0, 0.0)) -> tuple[int, int]:
    fx, fy = radar_affine(world_xy, map_half_extent, radar, mode, player_xy)
    w, h = radar
    return min(max(math.floor(fx), 0), w - 1), min(max(math.floor(fy), 0), h - 1)


def radar_unproject(xy, map_half_extent: float, radar=RADAR_SIZE, mode: str = "absolute",
                    player_xy=(0.0, 0.0)) -> tuple[float, float]:
    """World position of a radar pixel centre (inverse of the affine map)."""
    span = 2.0 * map_half_extent
    x = (xy[0] + 0.5) / radar[0] * span - map_half_extent
    y = map_half_extent - (xy[1] + 0.5) / radar[1] * span
    if mode == "player_relative":
        x += player_xy[0]
        y += player_xy[1]
    return x, y


def radar_frame(snapshot: GameSnapshot, map_half_extent: float, radar=RADAR_SIZE,
                mode: str = "absolute") -> RadarFrame:
    """Dots for every alive entity with a finite position, clamped to the radar."""
    ents = snapshot.entities
    if map_half_extent <= 0:
        raise ValueError("map_half_extent must be positive")
    if not len(ents):
        return RadarFrame(snapshot.tick, radar[0], radar[1], ())
    if mode not in ("absolute", "player_relative"):
        raise ValueError(f"unknown radar mode {mode!r}")
    # vectorised radar_project; the tests hold the two to the same pixels
    with np.errstate(all="ignore"):
        xy = ents["pos"][:, :2].astype(float)
        if mode == "player_relative":
            xy -= snapshot.local_pos[:2]
        span = 2.0 * map_half_extent
        fx = (xy[:, 0] + map_half_extent) / span * radar[0]
        fy = (map_half_extent - xy[:, 1]) / span * radar[1]
        keep = (ents["alive"] == 1) & np.isfinite(fx) & np.isfinite(fy)
        px = np.clip(np.floor(fx[keep]), 0, radar[0] - 1).astype(int).tolist()
        py = np.clip(np.floor(fy[keep]), 0, radar[1] - 1).astype(int).tolist()
    ids = np.flatnonzero(keep).tolist()
    teams = ents["team"][keep].tolist()
    return RadarFrame(snapshot.tick, radar[0], radar[1], tuple(zip(ids, px, py, teams)))


# -- wall-hack ----------------------------------------------------------------

def world_to_screen(point, view_proj, screen=SCREEN):
    return geometry.world_to_screen(point, view_proj, screen)


@dataclass(frozen=True)
class OverlayFrame:
    tick: int
    rects: tuple  # (entity id, x, y, w, h, color)

    kind = "wallhack"

    def shapes(self) -> list:
        return [{"id": i, "x": round(x, 2), "y": round(y, 2), "w": round(w, 2), "h": round(h, 2), "color": c}
                for i, x, y, w, h, c in self.rects]


def wallhack_frame(snapshot: GameSnapshot, screen=SCREEN, entity_height: float = 72.0,
                   entity_width: float = 32.0) -> OverlayFrame:
    """Boxes around every alive entity in front of the camera, walls or not."""
    ents = snapshot.entities
    vp = snapshot.view_proj
    if not len(ents) or not np.isfinite(vp).all():
        return OverlayFrame(snapshot.tick, ())
    with np.errstate(all="ignore"):
        x0, y0, x1, y1, _, valid = geometry.entity_boxes(ents["pos"], vp, screen, entity_height, entity_width)
        w, h = screen
        a, b = np.maximum(x0, 0.0), np.maximum(y0, 0.0)
        c, d = np.minimum(x1, float(w)), np.minimum(y1, float(h))
        keep = valid & (ents["alive"] == 1) & (c > a) & (d > b)
    idx = np.flatnonzero(keep)
    if not idx.size:
        return OverlayFrame(snapshot.tick, ())
    a, b, c, d = a[idx], b[idx], c[idx], d[idx]
    colors = [team_color(t) for t in ents["team"][idx].tolist()]
    rects = tuple(zip(idx.tolist(), a.tolist(), b.tolist(), (c - a).tolist(), (d - b).tolist(), colors))
    return OverlayFrame(snapshot.tick, rects)


def target_by_overlap(snapshot: GameSnapshot, screen=SCREEN, entity_height: float = 72.0,
                      entity_width: float = 32.0) -> int:
    """Fallback on-target test: nearest alive entity whose box covers the screen centre."""
    ents = snapshot.entities
    if not len(ents):
        return -1
    with np.errstate(all="ignore"):
        x0, y0, x1, y1, depth, valid = geometry.entity_boxes(ents["pos"], snapshot.view_proj, screen,
                                                             entity_height, entity_width)
    cx, cy = screen[0] / 2, screen[1] / 2
    hit = valid & (ents["alive"] == 1) & (x0 <= cx) & (cx <= x1) & (y0 <= cy) & (cy <= y1)
    if not hit.any():
        return -1
    idx = np.flatnonzero(hit)
    return int(idx[np.argmin(depth[idx])])


# -- trigger-bot ------------------------------------------------------------

@dataclass(frozen=True)
class FireCommand:
    action: str  # "start" | "stop"
    issued_at: int


@dataclass
class TriggerState:
    """What the bot believes about its own trigger, plus how it pulls it.

    ``channel`` carries synthetic mouse events; with ``unsafe_memory_fire``
    the bot instead pokes the primary fire flag with a host write.
    """

    channel: Optional[InputChannel] = None
    unsafe_memory_fire: bool = False
    process_name: str = PROCESS_NAME
    firing: bool = False
    commands: list = field(default_factory=list)

    def react(self, session: VmiSession, layout: GameLayout, on_enemy: bool) -> Optional[FireCommand]:
        if on_enemy == self.firing:
            return None
        cmd = FireCommand("start" if on_enemy else "stop", session.now)
        if self.unsafe_memory_fire:
            session.vmi_write(self.process_name, layout.addr("fire_state_primary"), U32.pack(int(on_enemy)))
        else:
            if self.channel is None:
                raise ValueError("input-injection fire needs a channel")
            self.channel.inject(InputEvent.button("left", on_enemy))
        self.firing = on_enemy
        self.commands.append(cmd)
        return cmd


def _on_enemy(session: VmiSession, layout: GameLayout, index: int, process_name: str) -> bool:
    if not 0 <= index < layout.max_entities:
        return False
    count = read_exact(session, process_name, layout.addr("entity_count"), 4)
    ptr = read_exact(session, process_name, layout.addr("entity_list_addr"), 8)
    if count is None or ptr is None or index >= U32.unpack(count)[0]:
        return False
    raw = read_exact(session, process_name, U64.unpack(ptr)[0] + index * layout.entity_stride,
                     layout.entity_stride)
    if raw is None:
        return False
    rec = np.frombuffer(raw, dtype=ENTITY_DTYPE)[0]
    return bool(rec["alive"] == 1 and rec["team"] == TEAM_ENEMY)


def triggerbot_poll_step(session: VmiSession, layout: GameLayout, state: TriggerState) -> Optional[FireCommand]:
    """One polling iteration: read the crosshair, then start or stop firing."""
    addr = layout.addr("crosshair_entity")
    raw = read_exact(session, state.process_name, addr, 4)
    if raw is None:
        raise StaleOffsets(f"crosshair_entity at {addr:#x} is not mapped")
    index = I32.unpack(raw)[0]
    return state.react(session, layout, _on_enemy(session, layout, index, state.process_name))


def triggerbot_event_setup(session: VmiSession, layout: GameLayout, state: TriggerState,
                           use_spp: bool = False) -> WatchHandle:
    """Watch the crosshair and run the polling decision on every change."""
    addr = layout.addr("crosshair_entity")

    def on_change(event):
        if event.new_value is not None and event.gva == addr and event.length == 4:
            index = I32.unpack(event.new_value)[0]
        else:
            raw = read_exact(session, state.process_name, addr, 4)
            index = I32.unpack(raw)[0] if raw is not None else -1
        return state.react(session, layout, _on_enemy(session, layout, index, state.process_name))

    return session.register_watch(state.process_name, addr, 4, on_change, use_spp=use_spp)


# -- sinks --------------------------------------------------------------------

def frame_json(frame) -> str:
    return json.dumps({"tick": frame.tick, "kind": frame.kind, "shapes": frame.shapes()},
                      separators=(",", ":"))


class NullSink:
    def __init__(self):
        self.count = 0

    def append(self, frame) -> None:
        self.count += 1

    def close(self) -> None:
        pass


class ListSink(NullSink):
    def __init__(self):
        super().__init__()
        self.frames: list = []

    def append(self, frame) -> None:
        self.count += 1
        self.frames.append(frame)


class FrameLog(NullSink):
    """Newline-delimited JSON frame log."""

    def __init__(self, path):
        super().__init__()
        self.path = Path(path)
        self._fh = self.path.open("w", encoding="utf-8", newline="\n")

    def append(self, frame) -> None:
        self.count += 1
        self._fh.write(frame_json(frame) + "\n")

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_frame_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- runtime ----------------------------------------------------------------

@dataclass
class CheatTelemetry:
    snapshots: int = 0
    frames: int = 0
    commands: int = 0
    starts: int = 0
    stops: int = 0
    events_delivered: int = 0
    overlay_direct_reads: int = 0


class CheatRuntime:
    """One cheat attached to a running simulation."""

    def __init__(self, session: VmiSession, kind: str, layout: GameLayout, *,
                 channel: Optional[InputChannel] = None, overlay_sink=None, poll_interval_ms: float = 16.0,
                 use_spp: bool = False, unsafe_memory_fire: bool = False, radar_size=RADAR_SIZE,
                 radar_mode: str = "absolute", map_half_extent: float = 4096.0, screen=SCREEN,
                 entity_height: float = 72.0, entity_width: float = 32.0, process_name: str = PROCESS_NAME):
        if kind not in CHEAT_KINDS:
            raise ValueError(f"unknown cheat {kind!r}; expected one of {', '.join(CHEAT_KINDS)}")
        self.session = session
        self.kind = kind
        self.layout = layout
        self.sink = overlay_sink if overlay_sink is not None else NullSink()
        self.poll_interval_ms = poll_interval_ms
        self.use_spp = use_spp
        self.radar_size = radar_size
        self.radar_mode = radar_mode
        self.map_half_extent = map_half_extent
        self.screen = screen
        self.entity_height = entity_height
        self.entity_width = entity_width
        self.process_name = process_name
        self.state = TriggerState(channel, unsafe_memory_fire, process_name)
        self.telemetry = CheatTelemetry()
        self.watch: Optional[WatchHandle] = None
        self.latest: Optional[GameSnapshot] = None
        self._tasks: list = []
        self._sim = None

    def attach(self, sim) -> "CheatRuntime":
        self._sim = sim
        if self.kind in ("radar", "wallhack"):
            self._tasks.append(sim.every(self.poll_interval_ms, self._reader, order=0, name="reader"))
            self._tasks.append(sim.every(self.poll_interval_ms, self._overlay, order=1, name="overlay"))
        elif self.kind == "triggerbot_poll":
            self._tasks.append(sim.every(self.poll_interval_ms, self._poll, order=0, name="reader"))
        else:
            self.watch = triggerbot_event_setup(self.session, self.layout, self.state, self.use_spp)
        return self

    def detach(self) -> CheatTelemetry:
        for task in self._tasks:
            self._sim.cancel(task)
        self._tasks.clear()
        if self.watch is not None and not self.session.closed:
            self.session.unregister_watch(self.watch)
            self.watch = None
        return self.finish()

    def finish(self) -> CheatTelemetry:
        t = self.telemetry
        t.commands = len(self.state.commands)
        t.starts = sum(c.action == "start" for c in self.state.commands)
        t.stops = t.commands - t.starts
        t.overlay_direct_reads = self.session.reads_by_task["overlay"]
        return t

    def _as(self, task: str, fn, *args):
        prev = self.session.current_task
        self.session.current_task = task
        try:
            return fn(*args)
        finally:
            self.session.current_task = prev

    def _reader(self, _due: int) -> None:
        self.latest = self._as("reader", read_snapshot, self.session, self.layout, self.process_name)
        self.telemetry.snapshots += 1

    def _overlay(self, _due: int) -> None:
        self.session.current_task = "overlay"
        try:
            snap = self.latest
            if snap is None:
                return
            if self.kind == "radar":
                frame = radar_frame(snap, self.map_half_extent, self.radar_size, self.radar_mode)
            else:
                frame = wallhack_frame(snap, self.screen, self.entity_height, self.entity_width)
            self.sink.append(frame)
            self.telemetry.frames += 1
        finally:
            self.session.current_task = "main"

    def _poll(self, _due: int) -> None:
        self._as("reader", triggerbot_poll_step, self.session, self.layout, self.state)
        self.telemetry.snapshots += 1


def cheat_run(session: VmiSession, cheat_kind: str, poll_interval_ms: float = 16.0, overlay_sink=None,
              duration_ticks: int = 600, *, layout: GameLayout, channel: Optional[InputChannel] = None,
              **options) -> CheatTelemetry:
    """Attach a cheat to the session's simulation, run it, detach it."""
    sim = session.driver
    if sim is None:
        raise ValueError("cheat_run needs a session driven by a simulation")
    if channel is None:
        channel = sim.game.channel
    runtime = CheatRuntime(session, cheat_kind, layout, channel=channel, overlay_sink=overlay_sink,
                           poll_interval_ms=poll_interval_ms, **options).attach(sim)
    for _ in range(duration_ticks):
        runtime.telemetry.events_delivered += len(sim.step())
    return runtime.detach()

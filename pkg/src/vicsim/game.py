"""A deterministic FPS-like toy game whose whole state lives in guest memory.

Layout (offsets from ``base``; 4 KiB mode uses two pages, huge-page mode puts
both inside one 2 MiB mapping)::

    hot page    0x000 entity list pointer (u64)   0x008 entity count (u32)
                0x00C max entities (u32)          0x010 frame counter (u64)
                0x080 crosshair entity (i32)      0x100 local player
                0x140 view-projection (16 x f32)  0x180 fire state primary (u32)
                0x200 colocated instruction byte  0x400 entity array
    engine page 0x1000 fire state shadow (u32)    0x1010 held keys (u32)
                0x1100 net send buffer

The crosshair, frame counter and entity array share one 4 KiB frame on
purpose: that is the busy frame a crosshair watch ends up guarding.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import geometry
from .errors import OffsetsError, WriteProtected
from .input_channel import Action, Device, InputChannel, InputQueue, guest_poll_input
from .paging import GuestMemory
from .slat_events import PageSize

GAME_BASE = 0x0000_0001_4000_0000
PROCESS_NAME = "game.exe"

OFF_ENTITY_LIST_PTR = 0x000
OFF_ENTITY_COUNT = 0x008
OFF_MAX_ENTITIES = 0x00C
OFF_FRAME_COUNTER = 0x010
OFF_CROSSHAIR = 0x080
OFF_LOCAL_PLAYER = 0x100
OFF_VIEW_PROJ = 0x140
OFF_FIRE_PRIMARY = 0x180
OFF_CODE = 0x200
OFF_ENTITIES = 0x400
OFF_FIRE_SHADOW = 0x1000
OFF_INPUT_STATE = 0x1010
OFF_NETBUF = 0x1100
REGION_SIZE = 0x2000

ENTITY_STRIDE = 32
ENTITY = struct.Struct("<3fBBHiH10x")
ENTITY_DTYPE = np.dtype([("pos", "<f4", (3,)), ("team", "u1"), ("alive", "u1"), ("waypoint", "<u2"),
                         ("health", "<i4"), ("respawn", "<u2"), ("_pad", "V10")])
LOCAL_PLAYER = struct.Struct("<3f2fi")
MATRIX = struct.Struct("<16f")
U32 = struct.Struct("<I")
I32 = struct.Struct("<i")
U64 = struct.Struct("<Q")
NOP = b"\x90"

TEAM_ALLY = 0
TEAM_ENEMY = 1
MAX_HEALTH = 100

# one simulated second in time units; a unit is 1/(1e9 * nominal_rate) s so
# that tick budgets and nanosecond costs are both exact integers
NS_PER_SECOND = 10**9

_KEY_BITS = {"w": 1, "a": 2, "s": 4, "d": 8}

assert ENTITY.size == ENTITY_STRIDE == ENTITY_DTYPE.itemsize


@dataclass(frozen=True)
class EntityScript:
    """A looping piecewise-linear path at constant speed."""

    team: int
    waypoints: tuple
    speed: float = 150.0


@dataclass(frozen=True)
class GameConfig:
    players: int = 24
    nominal_rate: int = 60
    work_us: float = 2000.0
    max_entities: int = 64
    map_half_extent: float = 4096.0
    screen: tuple = (1280, 720)
    fov_y_deg: float = 90.0
    near: float = 0.1
    far: float = 10_000.0
    weapon_damage: int = 5
    respawn_ticks: int = 90
    entity_speed: float = 150.0
    entity_height: float = 72.0
    entity_width: float = 32.0
    eye_height: float = 64.0
    player_speed: float = 300.0
    mouse_sensitivity_deg: float = 0.1
    local_start: tuple = (0.0, 0.0, 0.0)
    local_yaw_deg: float = 0.0
    local_yaw_rate_dps: float = 12.0
    waypoints_per_entity: int = 4
    spawn_extent: float = 2048.0
    scripts: Optional[tuple] = None
    huge_pages: bool = False
    colocate_code_data: bool = False
    memory_encryption: bool = False
    input_latency_ticks: int = 0
    expose_crosshair: bool = True

    def __post_init__(self):
        n = len(self.scripts) if self.scripts is not None else self.players
        if self.scripts is not None and self.players != n:
            object.__setattr__(self, "players", n)
        if not 0 <= n <= self.max_entities:
            raise ValueError(f"players must be within 0..{self.max_entities}")
        if OFF_ENTITIES + self.max_entities * ENTITY_STRIDE > 0x1000:
            raise ValueError("entity array must fit in the hot page")
        if self.nominal_rate <= 0:
            raise ValueError("nominal_rate must be positive")

    @property
    def dt(self) -> float:
        return 1.0 / self.nominal_rate

    @property
    def budget(self) -> "TickBudget":
        return TickBudget(self.nominal_rate, self.work_us)

    @property
    def mitigations(self) -> tuple:
        return tuple(m for m in ("huge_pages", "colocate_code_data", "memory_encryption") if getattr(self, m))


@dataclass(frozen=True)
class TickBudget:
    nominal_rate: int = 60
    work_us: float = 2000.0

    @property
    def budget_us(self) -> float:
        return 1e6 / self.nominal_rate

    def achieved_rate(self, event_cost_us_per_tick: float) -> float:
        return min(float(self.nominal_rate), 1e6 / (self.work_us + event_cost_us_per_tick))


# -- offsets file -----------------------------------------------------------

OFFSET_KEYS = ("base", "entity_list_addr", "entity_count", "local_player", "view_proj_matrix",
               "crosshair_entity", "fire_state_primary", "fire_state_shadow", "frame_counter",
               "entity_stride", "max_entities")
OPTIONAL_KEYS = frozenset({"crosshair_entity"})


@dataclass(frozen=True)
class GameLayout:
    """Published offsets. ``base`` is absolute; the rest are relative to it
    except ``entity_stride`` and ``max_entities`` which are plain values."""

    base: int
    entity_list_addr: int
    entity_count: int
    local_player: int
    view_proj_matrix: int
    crosshair_entity: Optional[int]
    fire_state_primary: int
    fire_state_shadow: int
    frame_counter: int
    entity_stride: int
    max_entities: int

    def addr(self, key: str) -> int:
        off = getattr(self, key)
        if off is None:
            raise OffsetsError(f"offset {key!r} not published")
        return self.base + off

    def to_text(self) -> str:
        lines = []
        for key in OFFSET_KEYS:
            value = getattr(self, key)
            if value is not None:
                lines.append(f"{key} = {value:#x}")
        return "\n".join(lines) + "\n"


def parse_offsets(text: str) -> GameLayout:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep:
            raise OffsetsError(f"line {lineno}: expected 'key = value'")
        if key not in OFFSET_KEYS:
            raise OffsetsError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = int(value, 16)
        except ValueError:
            raise OffsetsError(f"line {lineno}: {key} has non-hex value {value!r}") from None
    for key in OFFSET_KEYS:
        if key not in values:
            if key in OPTIONAL_KEYS:
                values[key] = None
            else:
                raise OffsetsError(f"missing required key {key!r}")
    return GameLayout(**values)


def export_offsets(layout: GameLayout, path) -> None:
    Path(path).write_text(layout.to_text(), encoding="utf-8")


def load_offsets(path) -> GameLayout:
    return parse_offsets(Path(path).read_text(encoding="utf-8"))


# -- scripted motion --------------------------------------------------------

def random_scripts(config: GameConfig, seed: int) -> tuple:
    rng = np.random.default_rng(seed)
    scripts = []
    ext = config.spawn_extent
    for i in range(config.players):
        k = config.waypoints_per_entity
        xy = rng.uniform(-ext, ext, size=(k, 2))
        z = rng.uniform(0.0, 64.0, size=(k, 1))
        pts = tuple(tuple(float(v) for v in p) for p in np.hstack([xy, z]))
        team = TEAM_ENEMY if i % 2 == 0 else TEAM_ALLY
        scripts.append(EntityScript(team, pts, config.entity_speed))
    return tuple(scripts)


class WaypointPaths:
    """Closed-form position of every scripted entity at time t."""

    def __init__(self, scripts):
        self.n = len(scripts)
        k = max((len(s.waypoints) for s in scripts), default=1)
        self.k = k
        pts = np.zeros((self.n, k + 1, 3))
        seg_len = np.zeros((self.n, k))
        for i, s in enumerate(scripts):
            w = np.asarray(s.waypoints, dtype=float).reshape(-1, 3)
            # pad short scripts by repeating the last point (zero-length segments)
            if len(w) < k:
                w = np.vstack([w[:-1], np.repeat(w[-1:], k - len(w) + 1, axis=0)])
            pts[i, :k] = w
            pts[i, k] = w[0]
            seg_len[i] = np.linalg.norm(pts[i, 1:] - pts[i, :-1], axis=1)
        self.points = pts
        self.seg_len = seg_len
        self.cum = np.concatenate([np.zeros((self.n, 1)), np.cumsum(seg_len, axis=1)], axis=1)
        self.total = self.cum[:, -1]
        self.speed = np.array([s.speed for s in scripts], dtype=float)
        self._rows = np.arange(self.n)
        # zero-length loops and segments park the entity: speed and 1/len are 0
        moving = self.total > 0
        self._loop = np.where(moving, self.total, 1.0)
        self._speed = np.where(moving, self.speed, 0.0)
        self._inv_len = np.divide(1.0, seg_len, out=np.zeros_like(seg_len), where=seg_len > 0)
        self._inner = self.cum[:, 1:-1]
        self._delta = pts[:, 1:] - pts[:, :-1]

    def at(self, t: float):
        if self.n == 0:
            return np.zeros((0, 3)), np.zeros(0, dtype=int)
        s = np.mod(self._speed * t, self._loop)
        seg = (self._inner <= s[:, None]).sum(axis=1)
        rows = self._rows
        frac = (s - self.cum[rows, seg]) * self._inv_len[rows, seg]
        return self.points[rows, seg] + self._delta[rows, seg] * frac[:, None], seg


# -- the game ---------------------------------------------------------------

@dataclass
class TickRecord:
    tick: int
    start_units: int
    duration_units: int
    charged_ns: int
    events: int


class ToyGame:
    """The game process.  ``tick()`` advances one fixed-dt simulation step."""

    def __init__(self, guest: GuestMemory, config: Optional[GameConfig] = None, seed: int = 7):
        self.guest = guest
        self.config = config = config or GameConfig()
        self.seed = seed
        self.rate = config.nominal_rate
        self.units_per_second = NS_PER_SECOND * self.rate
        self.budget_units = NS_PER_SECOND
        self.work_units = round(config.work_us * 1000) * self.rate
        self.time_units = 0
        self.input_queue = InputQueue()
        self.channel = InputChannel(self.input_queue, lambda: self.tick, config.input_latency_ticks)
        self.anticheat = None
        self.tick_listeners: list[Callable[[TickRecord], None]] = []
        self.fire_bursts = 0
        self.shots_fired = 0
        self.kills = 0
        self.last_tick_inputs: list = []
        self.scripts = config.scripts if config.scripts is not None else random_scripts(config, seed)
        self.paths = WaypointPaths(self.scripts)
        self._yaw_rate = math.radians(config.local_yaw_rate_dps)
        self._proj = geometry.perspective(config.fov_y_deg, config.screen[0] / config.screen[1],
                                          config.near, config.far)
        self._init_memory()

    # -- setup ------------------------------------------------------------

    @property
    def tick(self) -> int:
        return self.guest.now

    @property
    def sim_seconds(self) -> float:
        return self.time_units / self.units_per_second

    def _init_memory(self) -> None:
        cfg = self.config
        guest = self.guest
        self.process = proc = guest.create_process(PROCESS_NAME)
        base = GAME_BASE
        if cfg.huge_pages:
            gpa = guest.alloc_frame(PageSize.SIZE_2M)
            guest.map_page(proc, base, gpa, PageSize.SIZE_2M, writable=True, executable=cfg.colocate_code_data)
            self.data_frames = ((gpa, int(PageSize.SIZE_2M)),)
        else:
            hot = guest.alloc_frame()
            engine = guest.alloc_frame()
            guest.map_page(proc, base, hot, writable=True, executable=cfg.colocate_code_data)
            guest.map_page(proc, base + 0x1000, engine, writable=True)
            self.data_frames = ((hot, 0x1000), (engine, 0x1000))
        if cfg.memory_encryption:
            key = int.from_bytes(hashlib.sha256(f"vicsim-key-{self.seed}".encode()).digest()[:8], "little")
            for gpa, size in self.data_frames:
                guest.encrypt_range(gpa, size, key)
        self.layout = GameLayout(
            base=base,
            entity_list_addr=OFF_ENTITY_LIST_PTR,
            entity_count=OFF_ENTITY_COUNT,
            local_player=OFF_LOCAL_PLAYER,
            view_proj_matrix=OFF_VIEW_PROJ,
            crosshair_entity=OFF_CROSSHAIR if cfg.expose_crosshair else None,
            fire_state_primary=OFF_FIRE_PRIMARY,
            fire_state_shadow=OFF_FIRE_SHADOW,
            frame_counter=OFF_FRAME_COUNTER,
            entity_stride=ENTITY_STRIDE,
            max_entities=cfg.max_entities,
        )
        w = self._write
        w(OFF_ENTITY_LIST_PTR, U64.pack(base + OFF_ENTITIES))
        w(OFF_ENTITY_COUNT, U32.pack(cfg.players))
        w(OFF_MAX_ENTITIES, U32.pack(cfg.max_entities))
        w(OFF_FRAME_COUNTER, U64.pack(0))
        w(OFF_CROSSHAIR, I32.pack(-1))
        yaw = math.radians(cfg.local_yaw_deg)
        w(OFF_LOCAL_PLAYER, LOCAL_PLAYER.pack(*cfg.local_start, yaw, 0.0, MAX_HEALTH))
        if cfg.colocate_code_data:
            w(OFF_CODE, NOP)
        if cfg.players:
            pos, seg = self.paths.at(0.0)
            arr = np.zeros(cfg.players, dtype=ENTITY_DTYPE)
            arr["pos"] = pos
            arr["team"] = [s.team for s in self.scripts]
            arr["alive"] = 1
            arr["waypoint"] = seg
            arr["health"] = MAX_HEALTH
            w(OFF_ENTITIES, arr.tobytes())
        vp = self._view_proj(np.asarray(cfg.local_start, dtype=float), yaw, 0.0)
        w(OFF_VIEW_PROJ, MATRIX.pack(*vp.ravel()))
        self.view_proj = np.asarray(np.float32(vp), dtype=float)
        self.crosshair = -1
        # loading-screen writes are not part of any tick
        guest.slat.drain_tick_charge()

    # -- guest memory helpers ---------------------------------------------

    def _write(self, off: int, data: bytes) -> None:
        self.guest.guest_write(self.process, GAME_BASE + off, data)

    def _read(self, off: int, n: int) -> bytes:
        return self.guest.guest_read(self.process, GAME_BASE + off, n)

    def read_entities(self) -> np.ndarray:
        n = self.config.players
        if not n:
            return np.zeros(0, dtype=ENTITY_DTYPE)
        return np.frombuffer(self._read(OFF_ENTITIES, n * ENTITY_STRIDE), dtype=ENTITY_DTYPE).copy()

    def peek(self, off: int, n: int) -> bytes:
        """Plaintext guest bytes without a guest access: no cost, no traps."""
        tr = self.guest.translate(self.process, GAME_BASE + off)
        return self.guest.slat.phys_read(tr.gpa, n)

    def peek_entities(self) -> np.ndarray:
        n = self.config.players
        return np.frombuffer(self.peek(OFF_ENTITIES, n * ENTITY_STRIDE), dtype=ENTITY_DTYPE).copy()

    def read_local_player(self):
        x, y, z, yaw, pitch, health = LOCAL_PLAYER.unpack(self._read(OFF_LOCAL_PLAYER, LOCAL_PLAYER.size))
        return (x, y, z), yaw, pitch, health

    def read_fire_state(self) -> tuple[int, int]:
        return (U32.unpack(self._read(OFF_FIRE_PRIMARY, 4))[0], U32.unpack(self._read(OFF_FIRE_SHADOW, 4))[0])

    def read_frame_counter(self) -> int:
        return U64.unpack(self._read(OFF_FRAME_COUNTER, 8))[0]

    def read_crosshair(self) -> int:
        return I32.unpack(self._read(OFF_CROSSHAIR, 4))[0]

    def _view_proj(self, pos, yaw: float, pitch: float) -> np.ndarray:
        eye = (pos[0], pos[1], pos[2] + self.config.eye_height)
        return self._proj @ geometry.view_matrix(eye, yaw, pitch)

    def view_matrix(self) -> np.ndarray:
        pos, yaw, pitch, _ = self.read_local_player()
        eye = (pos[0], pos[1], pos[2] + self.config.eye_height)
        return geometry.view_matrix(eye, yaw, pitch)

    # -- tick ---------------------------------------------------------------

    def raycast(self, entities: np.ndarray, view_proj: np.ndarray) -> int:
        """Index of the nearest alive entity whose screen box holds the centre."""
        if not len(entities):
            return -1
        cfg = self.config
        x0, y0, x1, y1, depth, valid = geometry.entity_boxes(
            entities["pos"], view_proj, cfg.screen, cfg.entity_height, cfg.entity_width)
        cx, cy = cfg.screen[0] / 2, cfg.screen[1] / 2
        # NaN corners (behind the camera) compare False, so no errstate needed
        hit = valid & (entities["alive"] == 1) & (x0 <= cx) & (cx <= x1) & (y0 <= cy) & (cy <= y1)
        if not hit.any():
            return -1
        idx = np.flatnonzero(hit)
        return int(idx[np.argmin(depth[idx])])

    def _apply_inputs(self, inputs) -> tuple[float, float]:
        dyaw = dpitch = 0.0
        keys = None
        sens = math.radians(self.config.mouse_sensitivity_deg)
        for ev in inputs:
            if ev.device is Device.MOUSE:
                if ev.action is Action.MOVE:
                    dx, dy = ev.detail
                    dyaw -= dx * sens
                    dpitch -= dy * sens
                elif ev.detail == "left":
                    down = ev.action is Action.BUTTON_DOWN
                    if down:
                        self.fire_bursts += 1
                    # guest-originated: both copies written together
                    self._write(OFF_FIRE_PRIMARY, U32.pack(int(down)))
                    self._write(OFF_FIRE_SHADOW, U32.pack(int(down)))
            elif ev.detail in _KEY_BITS:
                if keys is None:
                    keys = U32.unpack(self._read(OFF_INPUT_STATE, 4))[0]
                bit = _KEY_BITS[ev.detail]
                keys = keys | bit if ev.action is Action.KEY_DOWN else keys & ~bit
        if keys is not None:
            self._write(OFF_INPUT_STATE, U32.pack(keys))
        return dyaw, dpitch

    def step(self) -> TickRecord:
        cfg = self.config
        guest = self.guest
        slat = guest.slat
        k = self.tick
        events_before = slat.n_events

        # 1. input
        inputs = guest_poll_input(self)
        self.last_tick_inputs = inputs
        dyaw, dpitch = self._apply_inputs(inputs)

        # 2. scripted entities
        ents = self.read_entities()
        if len(ents):
            pos, seg = self.paths.at((k + 1) * cfg.dt)
            ents["pos"] = pos
            ents["waypoint"] = seg
            dead = ents["alive"] == 0
            if dead.any():
                ents["respawn"] = np.where(dead & (ents["respawn"] > 0), ents["respawn"] - 1, ents["respawn"])
                back = dead & (ents["respawn"] == 0)
                ents["alive"] = np.where(back, 1, ents["alive"])
                ents["health"] = np.where(back, MAX_HEALTH, ents["health"])
            raw = ents.tobytes()
            # one store per entity record, as the engine updates them one by one;
            # the array never leaves its page, so a single walk covers all of them
            tr = guest.translate(self.process, GAME_BASE + OFF_ENTITIES)
            if not tr.writable:
                raise WriteProtected("entity array is read-only")
            slat.write_records(self.process.pid, GAME_BASE + OFF_ENTITIES, tr.gpa, raw, ENTITY_STRIDE)

        # 3. local player
        (x, y, z), yaw, pitch, health = self.read_local_player()
        keys = U32.unpack(self._read(OFF_INPUT_STATE, 4))[0]
        yaw += dyaw + self._yaw_rate * cfg.dt
        pitch = max(-geometry.MAX_PITCH, min(geometry.MAX_PITCH, pitch + dpitch))
        if keys:
            step = cfg.player_speed * cfg.dt
            fx, fy = math.cos(yaw), math.sin(yaw)
            fwd = (keys & 1 and 1) - (keys & 4 and 1)
            side = (keys & 8 and 1) - (keys & 2 and 1)
            x += step * (fwd * fx + side * fy)
            y += step * (fwd * fy - side * fx)
        packed = LOCAL_PLAYER.pack(x, y, z, yaw, pitch, health)
        self._write(OFF_LOCAL_PLAYER, packed)
        # continue with the f32-rounded values the guest actually stores
        x, y, z, yaw, pitch, _ = LOCAL_PLAYER.unpack(packed)

        # 4. camera
        vp32 = np.float32(self._view_proj((x, y, z), yaw, pitch))
        self._write(OFF_VIEW_PROJ, vp32.tobytes())
        self.view_proj = vp = vp32.astype(float)

        # 5. crosshair
        target = self.raycast(ents, vp)
        self.crosshair = target
        self._write(OFF_CROSSHAIR, I32.pack(target))

        # 6. weapon
        fire = U32.unpack(self._read(OFF_FIRE_PRIMARY, 4))[0]
        if fire and target >= 0:
            self.shots_fired += 1
            rec = ents[target]
            hp = int(rec["health"]) - cfg.weapon_damage
            if hp <= 0:
                hp = 0
                rec["alive"] = 0
                rec["respawn"] = cfg.respawn_ticks
                self.kills += 1
            rec["health"] = hp
            self._write(OFF_ENTITIES + target * ENTITY_STRIDE, ents[target:target + 1].tobytes())

        # 7. in-guest anti-cheat samples the redundancy before the mirror step
        if self.anticheat is not None:
            self.anticheat.on_tick(self)

        # 8. mirror primary -> shadow
        self._write(OFF_FIRE_SHADOW, U32.pack(fire))

        # 9. colocated instruction and per-tick engine bookkeeping
        if cfg.colocate_code_data:
            guest.guest_execute(self.process, GAME_BASE + OFF_CODE)
        alive = int(ents["alive"].sum()) if len(ents) else 0
        self._write(OFF_NETBUF, U64.pack(k) + U32.pack(alive) + U32.pack(target & 0xFFFFFFFF))

        # 10. frame counter
        fc = U64.unpack(self._read(OFF_FRAME_COUNTER, 8))[0]
        self._write(OFF_FRAME_COUNTER, U64.pack(fc + 1))

        # 11. budget
        charged = slat.drain_tick_charge()
        duration = max(self.budget_units, self.work_units + charged * self.rate)
        record = TickRecord(k, self.time_units, duration, charged, slat.n_events - events_before)
        self.time_units += duration
        guest.now = k + 1
        for listener in self.tick_listeners:
            listener(record)
        return record

    def run(self, ticks: int) -> None:
        for _ in range(ticks):
            self.step()

    # -- state digests ----------------------------------------------------

    def state_bytes(self) -> bytes:
        """Plaintext game region as the guest sees it (read without charging)."""
        slat = self.guest.slat
        return b"".join(slat.phys_read(gpa, size) for gpa, size in self.data_frames)

    def state_hash(self) -> str:
        return hashlib.sha256(self.state_bytes()).hexdigest()


def memory_image_digest(guest: GuestMemory) -> str:
    """Digest over every host frame backing the guest."""
    h = hashlib.sha256()
    for index in sorted(guest.slat.host.frames):
        h.update(index.to_bytes(8, "little"))
        h.update(guest.slat.host.frames[index])
    return h.hexdigest()


def game_init(guest: GuestMemory, config: Optional[GameConfig] = None, seed: int = 7) -> ToyGame:
    return ToyGame(guest, config, seed)

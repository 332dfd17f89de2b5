"""Scenario runner: benchmark and cheat sessions, per-second sampling, diffs.

A session runs the game for ``session_seconds`` of simulated time and counts
the ticks that start in each second.  Repetitions use seeds seed, seed+1, ...
and are averaged pointwise; cheat sessions are then compared against the
averaged benchmark (baseline minus cheat, so positive means slower).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .anticheat import AntiCheat, HypervisorProfile, ProbeReport, apply_mitigation, normalize_mitigation
from .cheats import CheatRuntime, CheatTelemetry, NullSink, radar_unproject
from .errors import LengthMismatch
from .game import GameConfig, ToyGame, memory_image_digest
from .paging import GuestMemory
from .sim import Simulation
from .slat_events import CostModel
from .vmi import VmiSession

REPORT_FORMAT = "vic-sim-report"
REPORT_VERSION = 1
SCENARIOS = ("benchmark", "radar", "wallhack", "triggerbot_poll", "triggerbot_event", "triggerbot_event_spp")
VERDICT_ORDER = ("clean", "suspicious", "detected")


@dataclass(frozen=True)
class Scenario:
    name: str
    players: int = 24
    seed: int = 7
    mitigations: tuple = ()
    session_seconds: int = 600
    repetitions: int = 3
    spp: bool = False
    poll_interval_ms: float = 16.0
    unsafe_memory_fire: bool = False
    cost: CostModel = field(default_factory=CostModel)
    profile: HypervisorProfile = field(default_factory=HypervisorProfile)

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.name!r}; expected one of {', '.join(SCENARIOS)}")
        if self.session_seconds <= 0 or self.repetitions <= 0:
            raise ValueError("session_seconds and repetitions must be positive")
        object.__setattr__(self, "mitigations",
                           tuple(sorted({normalize_mitigation(m) for m in self.mitigations})))

    @property
    def cheat_kind(self) -> Optional[str]:
        if self.name == "benchmark":
            return None
        return "triggerbot_event" if self.name == "triggerbot_event_spp" else self.name

    @property
    def use_spp(self) -> bool:
        return self.name == "triggerbot_event_spp" or (self.spp and self.cheat_kind == "triggerbot_event")

    def game_config(self) -> GameConfig:
        config = GameConfig(players=self.players)
        for m in self.mitigations:
            config = apply_mitigation(config, m)
        return config

    def seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.repetitions)]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "players": self.players,
            "seed": self.seed,
            "session_seconds": self.session_seconds,
            "repetitions": self.repetitions,
            "mitigations": list(self.mitigations),
            "spp": self.use_spp,
            "poll_interval_ms": self.poll_interval_ms,
            "unsafe_memory_fire": self.unsafe_memory_fire,
            "cost": {"vmexit_cost_us": self.cost.vmexit_cost_us,
                     "baseline_access_cost_us": self.cost.baseline_access_cost_us},
            "profile": {"tsc_offset_enabled": self.profile.tsc_offset_enabled,
                        "ud_on_vmread": self.profile.ud_on_vmread},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        name = d["name"]
        spp = bool(d.get("spp", False)) and name != "triggerbot_event_spp"
        return cls(name=name, players=d["players"], seed=d["seed"], mitigations=tuple(d["mitigations"]),
                   session_seconds=d["session_seconds"], repetitions=d["repetitions"], spp=spp,
                   poll_interval_ms=d["poll_interval_ms"], unsafe_memory_fire=d["unsafe_memory_fire"],
                   cost=CostModel(**d["cost"]), profile=HypervisorProfile(**d["profile"]))


@dataclass
class SessionResult:
    """One repetition."""

    seed: int
    rates: list
    events: list
    probe: ProbeReport
    telemetry: Optional[CheatTelemetry] = None
    state_trace: Optional[str] = None
    memory_digest: Optional[str] = None


@dataclass
class SessionReport:
    scenario: Scenario
    sessions: list

    @property
    def rates(self) -> list[list[int]]:
        return [s.rates for s in self.sessions]

    @property
    def averaged(self) -> np.ndarray:
        return np.mean(np.asarray(self.rates, dtype=float), axis=0)

    @property
    def events_per_second(self) -> np.ndarray:
        return np.mean(np.asarray([s.events for s in self.sessions], dtype=float), axis=0)

    @property
    def mean_rate(self) -> float:
        return float(self.averaged.mean())

    @property
    def mean_events_per_second(self) -> float:
        return float(self.events_per_second.mean())

    @property
    def probes(self) -> list[ProbeReport]:
        return [s.probe for s in self.sessions]

    @property
    def verdict(self) -> str:
        return max((p.verdict for p in self.probes), key=VERDICT_ORDER.index)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "scenario": self.scenario.to_dict(),
            "summary": {
                "mean_rate": _num(self.mean_rate),
                "mean_events_per_second": _num(self.mean_events_per_second),
                "verdict": self.verdict,
            },
            "averaged": {
                "rates": [_num(v) for v in self.averaged],
                "events_per_second": [_num(v) for v in self.events_per_second],
            },
            "repetitions": [
                {
                    "seed": s.seed,
                    "rates": list(s.rates),
                    "events": list(s.events),
                    "probe": s.probe.to_dict(),
                    "telemetry": asdict(s.telemetry) if s.telemetry is not None else None,
                }
                for s in self.sessions
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "SessionReport":
        if d.get("format") != REPORT_FORMAT:
            raise ValueError("not a vic-sim report")
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('version')!r}")
        sessions = []
        for rep in d["repetitions"]:
            p = rep["probe"]
            probe = ProbeReport(p["timing_ratio"], p["vm_instruction_artifact"], p["redundancy_mismatch"])
            tel = CheatTelemetry(**rep["telemetry"]) if rep["telemetry"] is not None else None
            sessions.append(SessionResult(rep["seed"], rep["rates"], rep["events"], probe, tel))
        return cls(Scenario.from_dict(d["scenario"]), sessions)


def _num(v: float):
    """Stable JSON numbers: integers stay integers, the rest keep 6 decimals."""
    v = float(v)
    return int(v) if v.is_integer() else round(v, 6)


def load_report(path) -> SessionReport:
    return SessionReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- running ------------------------------------------------------------------

def run_session(scenario: Scenario, rep: int = 0, overlay_sink=None, trace: bool = False) -> SessionResult:
    """One deterministic session with seed ``scenario.seed + rep``."""
    seed = scenario.seed + rep
    guest = GuestMemory(cost=scenario.cost)
    game = ToyGame(guest, scenario.game_config(), seed)
    anticheat = AntiCheat(scenario.profile).attach(game)
    sim = Simulation(game)
    runtime = None
    session = None
    if scenario.cheat_kind is not None:
        session = VmiSession(guest, sim)
        cfg = game.config
        runtime = CheatRuntime(
            session, scenario.cheat_kind, game.layout, channel=game.channel,
            overlay_sink=overlay_sink if overlay_sink is not None else NullSink(),
            poll_interval_ms=scenario.poll_interval_ms, use_spp=scenario.use_spp,
            unsafe_memory_fire=scenario.unsafe_memory_fire, map_half_extent=cfg.map_half_extent,
            screen=cfg.screen, entity_height=cfg.entity_height, entity_width=cfg.entity_width,
        ).attach(sim)
    # probes run while the game is loading, with any watch already in place
    anticheat.run_probes(game)

    seconds = scenario.session_seconds
    ups = game.units_per_second
    rates = [0] * seconds
    events = [0] * seconds
    digest = hashlib.sha256() if trace else None

    def sample(record):
        sec = record.start_units // ups
        rates[sec] += 1
        events[sec] += record.events
        if digest is not None:
            digest.update(record.duration_units.to_bytes(8, "little"))
            digest.update(game.state_bytes())

    game.tick_listeners.append(sample)
    sim.run_until(seconds * ups)
    game.tick_listeners.remove(sample)

    telemetry = None
    if runtime is not None:
        telemetry = runtime.detach()
        session.close()
    return SessionResult(seed, rates, events, anticheat.report(), telemetry,
                         digest.hexdigest() if digest is not None else None,
                         memory_image_digest(guest) if trace else None)


def run_scenario(scenario: Scenario, overlay_sink=None, trace: bool = False) -> SessionReport:
    """All repetitions, in order.  Only the first repetition feeds ``overlay_sink``."""
    sessions = [run_session(scenario, rep, overlay_sink if rep == 0 else None, trace)
                for rep in range(scenario.repetitions)]
    return SessionReport(scenario, sessions)


# -- comparison -----------------------------------------------------------------

@dataclass(frozen=True)
class DiffStats:
    series: np.ndarray
    mean: float
    q1: float
    q2: float
    q3: float
    min: float
    max: float

    def to_dict(self) -> dict:
        return {k: _num(getattr(self, k)) for k in ("mean", "q1", "q2", "q3", "min", "max")}


def diff_series(cheat: Sequence[float], baseline: Sequence[float]) -> DiffStats:
    c = np.asarray(cheat, dtype=float)
    b = np.asarray(baseline, dtype=float)
    if c.shape != b.shape:
        raise LengthMismatch(f"cheat has {c.size} samples, baseline {b.size}")
    d = b - c
    if not d.size:
        raise LengthMismatch("empty series")
    q1, q2, q3 = np.percentile(d, [25, 50, 75])
    return DiffStats(d, float(d.mean()), float(q1), float(q2), float(q3), float(d.min()), float(d.max()))


def diff_report(cheat: SessionReport, baseline: SessionReport) -> DiffStats:
    return diff_series(cheat.averaged, baseline.averaged)


@dataclass(frozen=True)
class Correlation:
    players: tuple
    events_per_second: tuple
    non_decreasing: bool
    strictly_increasing: bool

    @property
    def verdict(self) -> str:
        if self.strictly_increasing:
            return "strictly increasing"
        return "non-decreasing" if self.non_decreasing else "not monotone"


def events_per_player_correlation(reports: Sequence[SessionReport]) -> Correlation:
    ordered = sorted(reports, key=lambda r: r.scenario.players)
    players = tuple(r.scenario.players for r in ordered)
    eps = tuple(r.mean_events_per_second for r in ordered)
    steps = np.diff(eps)
    return Correlation(players, eps, bool((steps >= 0).all()), bool((steps > 0).all()))


def summary_table(reports: Sequence[SessionReport], baseline: SessionReport) -> str:
    """Quartile box summary of each report against the baseline, one row each."""
    header = f"{'scenario':<22}{'mean':>8}{'q1':>8}{'median':>8}{'q3':>8}{'min':>8}{'max':>8}{'rate':>8}"
    rows = [header, "-" * len(header)]
    for r in reports:
        d = diff_report(r, baseline)
        label = r.scenario.name + ("+" + "+".join(r.scenario.mitigations) if r.scenario.mitigations else "")
        rows.append(f"{label:<22}{d.mean:>8.2f}{d.q1:>8.2f}{d.q2:>8.2f}{d.q3:>8.2f}"
                    f"{d.min:>8.2f}{d.max:>8.2f}{r.mean_rate:>8.2f}")
    return "\n".join(rows)


def with_players(scenario: Scenario, players: int) -> Scenario:
    return replace(scenario, players=players)


# -- ground-truth comparisons ---------------------------------------------------

def radar_position_error(config: GameConfig, seed: int = 7, seconds: int = 60,
                         poll_interval_ms: float = 16.0) -> float:
    """Mean world-space distance between radar dots and the true positions.

    Every alive entity counts once per radar frame; an entity the radar failed
    to draw counts as the full map diagonal.
    """
    guest = GuestMemory()
    game = ToyGame(guest, config, seed)
    sim = Simulation(game)
    session = VmiSession(guest, sim)
    half = config.map_half_extent
    miss = 2.0 * half * 2 ** 0.5
    errors: list[float] = []

    class TruthSink(NullSink):
        def append(self, frame):
            self.count += 1
            truth = game.peek_entities()
            dots = {i: (x, y) for i, x, y, _ in frame.dots}
            for i in np.flatnonzero(truth["alive"] == 1):
                if i in dots:
                    wx, wy = radar_unproject(dots[i], half, (frame.width, frame.height))
                    tx, ty = truth["pos"][i][:2]
                    errors.append(float(np.hypot(wx - tx, wy - ty)))
                else:
                    errors.append(miss)

    runtime = CheatRuntime(session, "radar", game.layout, overlay_sink=TruthSink(),
                           poll_interval_ms=poll_interval_ms, map_half_extent=half).attach(sim)
    sim.run_until(seconds * game.units_per_second)
    runtime.detach()
    session.close()
    return float(np.mean(errors)) if errors else 0.0


def irrelevant_events_per_tick(config: GameConfig, seed: int = 7, ticks: int = 120, use_spp: bool = False) -> float:
    """Irrelevant traps per tick caused by a single crosshair watch."""
    guest = GuestMemory()
    game = ToyGame(guest, config, seed)
    session = VmiSession(guest)
    session.register_watch(game.process.name, game.layout.addr("crosshair_entity"), 4, lambda ev: None,
                           use_spp=use_spp)
    slat = guest.slat
    before = slat.n_events - slat.n_relevant
    game.run(ticks)
    session.close()
    return (slat.n_events - slat.n_relevant - before) / ticks

"""The defender: in-guest probes and load-time mitigations.

Probes see only what guest code could see: the guest clock (which the
hypervisor may offset), whether a privileged instruction faults, and the
game's own memory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Union

from .errors import IncompatibleAtRuntime
from .game import OFF_FIRE_PRIMARY, OFF_FIRE_SHADOW, U32, GameConfig, ToyGame
from .paging import GuestMemory

TIMING_THRESHOLD = 10.0
SUSPICIOUS_RATIO = 1.5
MIN_ITERATIONS = 100

MITIGATIONS = ("huge_pages", "colocate_code_data", "memory_encryption")
MITIGATION_ALIASES = {"colocate": "colocate_code_data", "encrypt": "memory_encryption",
                      "encryption": "memory_encryption", "huge": "huge_pages"}


@dataclass(frozen=True)
class HypervisorProfile:
    tsc_offset_enabled: bool = False
    ud_on_vmread: bool = True

    @classmethod
    def faithful(cls) -> "HypervisorProfile":
        return cls(tsc_offset_enabled=True, ud_on_vmread=True)


@dataclass(frozen=True)
class ProbeReport:
    timing_ratio: float
    vm_instruction_artifact: bool
    redundancy_mismatch: bool

    @property
    def verdict(self) -> str:
        if self.vm_instruction_artifact or self.redundancy_mismatch or self.timing_ratio > TIMING_THRESHOLD:
            return "detected"
        if self.timing_ratio > SUSPICIOUS_RATIO:
            return "suspicious"
        return "clean"

    def to_dict(self) -> dict:
        return {"timing_ratio": round(self.timing_ratio, 6),
                "vm_instruction_artifact": self.vm_instruction_artifact,
                "redundancy_mismatch": self.redundancy_mismatch,
                "verdict": self.verdict}


def install_profile(guest: GuestMemory, profile: HypervisorProfile) -> None:
    """Run the guest under ``profile``'s clock policy."""
    guest.slat.tsc_offset_enabled = profile.tsc_offset_enabled


def timing_probe(guest: GuestMemory, profile: Optional[HypervisorProfile] = None,
                 iterations: int = 1000) -> float:
    """rdtsc; cpuid; rdtsc against rdtsc; nop; rdtsc, ``iterations`` times each.

    Returns the ratio of the two guest-visible durations.  The probe's cost is
    charged to the guest like any other code.
    """
    if iterations < MIN_ITERATIONS:
        raise ValueError(f"timing probe needs at least {MIN_ITERATIONS} iterations")
    if profile is not None:
        install_profile(guest, profile)
    slat = guest.slat
    t0 = slat.visible_ns
    slat.instruction_exits(iterations)
    t1 = slat.visible_ns
    slat.plain_instructions(iterations)
    t2 = slat.visible_ns
    exiting, plain = t1 - t0, t2 - t1
    if plain == 0:
        return 1.0 if exiting == 0 else math.inf
    return exiting / plain


def emulation_probe(guest: GuestMemory, profile: Optional[HypervisorProfile] = None) -> bool:
    """True when vmread executes instead of raising #UD, which bare metal never does."""
    profile = profile or HypervisorProfile()
    guest.slat.instruction_exits(1)
    return not profile.ud_on_vmread


def redundancy_check(game: ToyGame) -> bool:
    """Primary and shadow fire state disagree (read as the game itself would)."""
    primary = U32.unpack(game._read(OFF_FIRE_PRIMARY, 4))[0]
    shadow = U32.unpack(game._read(OFF_FIRE_SHADOW, 4))[0]
    return primary != shadow


class AntiCheat:
    """In-guest anti-cheat: probes once while the game loads, checks state every tick."""

    def __init__(self, profile: Optional[HypervisorProfile] = None, probe_iterations: int = 1000):
        self.profile = profile or HypervisorProfile()
        self.probe_iterations = probe_iterations
        self.timing_ratio: Optional[float] = None
        self.artifact = False
        self.mismatches = 0
        self.first_mismatch_tick: Optional[int] = None
        self.ticks_checked = 0

    def attach(self, game: ToyGame) -> "AntiCheat":
        game.anticheat = self
        return self

    def run_probes(self, game: ToyGame) -> None:
        guest = game.guest
        self.timing_ratio = timing_probe(guest, self.profile, self.probe_iterations)
        self.artifact = emulation_probe(guest, self.profile)
        # loading-screen work: not part of any sampled tick
        guest.slat.drain_tick_charge()

    def on_tick(self, game: ToyGame) -> None:
        self.ticks_checked += 1
        if redundancy_check(game):
            self.mismatches += 1
            if self.first_mismatch_tick is None:
                self.first_mismatch_tick = game.tick

    def report(self) -> ProbeReport:
        ratio = self.timing_ratio if self.timing_ratio is not None else 1.0
        return ProbeReport(ratio, self.artifact, self.mismatches > 0)


def normalize_mitigation(name: str) -> str:
    name = MITIGATION_ALIASES.get(name.strip(), name.strip())
    if name not in MITIGATIONS:
        raise ValueError(f"unknown mitigation {name!r}; expected one of {', '.join(MITIGATIONS)}")
    return name


def apply_mitigation(target: Union[GameConfig, ToyGame], which: str) -> GameConfig:
    """Return ``target`` with the mitigation switched on.

    Mitigations change the memory layout, so they only exist as load-time
    configuration; a running game rejects them.
    """
    which = normalize_mitigation(which)
    if isinstance(target, ToyGame):
        raise IncompatibleAtRuntime(f"{which} must be chosen before the game initialises")
    return replace(target, **{which: True})

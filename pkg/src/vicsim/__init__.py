"""Simulated guest, introspection API, toy game, cheats, anti-cheat and harness."""

__version__ = "0.1.0"

"""Bistatic ISAC sensing: channel simulation, phase cleaning, feature cubes,
detection and tracking, vital signs and link-level environmental inference."""

__version__ = "0.1.0"

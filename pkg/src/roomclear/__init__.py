"""Multi-agent room clearance gridworld with a feudal commander/agent hierarchy."""

from importlib import resources

__version__ = "0.1.0"


def map_path(name: str):
    """Path of a bundled scenario file, e.g. ``map_path("loop4")``."""
    return resources.files(__name__) / "maps" / f"{name}.txt"

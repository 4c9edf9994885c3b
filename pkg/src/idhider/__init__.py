"""Identity hider: hide faces from human vision while keeping them machine-recognizable."""

__version__ = "0.1.0"

"""Multi-turn zoom-in visual search on synthetic scenes, trained with group-baseline RL."""

__version__ = "0.1.0"

"""tilepar: a data-parallel array IR with automatic cache/register tiling,
exact tiled reference semantics, an online tile-size tuner, and a
trace-driven cache simulator."""

__version__ = "0.1.0"

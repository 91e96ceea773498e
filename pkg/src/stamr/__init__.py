"""Space-time adaptive sequential-refinement solver for oil-water porous-media flow."""

__version__ = "0.1.0"

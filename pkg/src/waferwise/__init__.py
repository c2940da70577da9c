"""waferwise: synthetic double-patterning wafer data and overlay-driven
prediction of space CD and capacitance."""

__version__ = "0.1.0"

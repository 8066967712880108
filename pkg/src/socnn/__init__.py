"""Shape-oriented point-cloud learning (ShapeConv / SOCNN) on a small numpy
autodiff engine."""

__version__ = "0.1.0"

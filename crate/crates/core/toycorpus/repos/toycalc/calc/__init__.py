"""Small arithmetic and statistics helpers."""

from calc.ops import add, divide, multiply, power, subtract
from calc.stats import clamp, mean, median

__all__ = ["add", "subtract", "multiply", "divide", "power", "mean", "median", "clamp"]

"""Basic arithmetic operations."""


def add(a, b):
    """Return the sum of a and b."""
    return a + b


def subtract(a, b):
    """Return a minus b."""
    return a - b


def multiply(a, b):
    # Plain product, no rounding.
    return a * b


def divide(a, b):
    """Return a divided by b.

    Raises ZeroDivisionError when b is zero.
    """
    if b == 0:
        raise ZeroDivisionError("division by zero")
    return a / b


def power(base, exp):
    """Raise base to a non-negative integer exponent."""
    if exp < 0:
        raise ValueError("negative exponent")
    result = 1
    for _ in range(exp):
        result *= base
    return result

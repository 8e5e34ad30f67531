"""Price formatting and discounts."""


def apply_discount(price, percent):
    """Reduce price by percent (0-100)."""
    if not 0 <= percent <= 100:
        raise ValueError("percent out of range")
    return price * (100 - percent) / 100


def format_price(amount):
    # Two decimals with a dollar sign.
    return "${:.2f}".format(amount)

"""Stock ledger keyed by item name."""


class Inventory:
    """Tracks quantities and unit prices."""

    def __init__(self):
        self._items = {}

    def add_item(self, name, quantity, unit_price):
        """Add stock; re-adding an item keeps its first price."""
        if quantity <= 0:
            raise ValueError("quantity must be positive")
        qty, price = self._items.get(name, (0, unit_price))
        self._items[name] = (qty + quantity, price)

    def remove_item(self, name, quantity):
        # Removing more than is in stock is an error, not a clamp.
        qty, price = self._items.get(name, (0, 0))
        if quantity > qty:
            raise ValueError("not enough stock")
        remaining = qty - quantity
        if remaining == 0:
            del self._items[name]
        else:
            self._items[name] = (remaining, price)

    def quantity(self, name):
        return self._items.get(name, (0, 0))[0]

    def total_value(self):
        """Sum of quantity times unit price over all items."""
        return sum(qty * price for qty, price in self._items.values())

    def low_stock(self, threshold):
        """Names with quantity strictly below threshold, sorted."""
        return sorted(name for name, (qty, _) in self._items.items() if qty < threshold)

"""In-memory inventory tracking."""

from inventory.pricing import apply_discount, format_price
from inventory.store import Inventory

__all__ = ["Inventory", "apply_discount", "format_price"]

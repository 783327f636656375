"""Multiply-accumulate ledger.

Matrix products in the engine report their MAC count here. One MAC is one
multiply plus one add; elementwise work is not counted.
"""

from dataclasses import dataclass, field

FORWARD = "forward"
BACKWARD_ERROR = "backward_error"
WEIGHT_UPDATE = "weight_update"
FEEDBACK_UPDATE = "feedback_update"

CATEGORIES = (FORWARD, BACKWARD_ERROR, WEIGHT_UPDATE, FEEDBACK_UPDATE)


def matmul_macs(rows: int, inner: int, cols: int) -> int:
    """MACs of a (rows x inner) @ (inner x cols) product."""
    return rows * inner * cols


@dataclass
class MacLedger:
    counts: dict[str, int] = field(default_factory=lambda: {c: 0 for c in CATEGORIES})

    def add(self, category: str, macs: int) -> None:
        if category not in self.counts:
            raise ValueError(f"Unknown MAC category: {category}")
        self.counts[category] += int(macs)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def snapshot(self) -> dict[str, int]:
        return dict(self.counts)


def charge(ledger: MacLedger | None, category: str, macs: int) -> None:
    if ledger is not None:
        ledger.add(category, macs)

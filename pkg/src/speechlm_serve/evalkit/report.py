"""Plain-text summary table: one row per system, columns PER, bad rate and SIM."""

from dataclasses import dataclass
from typing import Iterable, List, Optional

COLUMNS = ("system", "PER", "bad rate", "SIM")


@dataclass(frozen=True)
class SummaryRow:
    system: str
    per: Optional[float] = None
    bad_rate: Optional[float] = None
    sim: Optional[float] = None

    def cells(self) -> List[str]:
        return [
            self.system,
            "-" if self.per is None else f"{self.per * 100:.2f}",
            "-" if self.bad_rate is None else f"{self.bad_rate * 100:.1f}%",
            "-" if self.sim is None else f"{self.sim:.3f}",
        ]


def summary_table(rows: Iterable[SummaryRow]) -> str:
    """Pipe-separated table; PER is given in percent."""
    body = [row.cells() for row in rows]
    widths = [max(len(c) for c in column) for column in zip(COLUMNS, *body)]

    def line(cells):
        return " | ".join(cell.ljust(width) for cell, width in zip(cells, widths)).rstrip()

    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([line(COLUMNS), rule, *(line(cells) for cells in body)]) + "\n"

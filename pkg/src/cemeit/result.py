"""Common container returned by the iterative reconstructors."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import Conductivity


@dataclass
class ReconResult:
    sigma: Conductivity
    method: str
    history: list = field(default_factory=list)  # one dict per iteration
    wall_time: float = 0.0
    flags: dict = field(default_factory=dict)
    segmentation: np.ndarray | None = None

    @property
    def iterations(self) -> int:
        return len(self.history)

    def write_trace(self, path) -> None:
        """Per-iteration trace as CSV (columns are the union of history keys)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        keys: list[str] = []
        for row in self.history:
            keys.extend(k for k in row if k not in keys)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.history)

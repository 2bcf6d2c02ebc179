"""Reconstruction tunables. Single source of truth for CLI defaults."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .grid import SdfGrid


@dataclass
class ReconstructionConfig:
    """All knobs of the iterative reconstruction.

    ``tau`` is the inner-loop step-norm convergence threshold; when left as
    None it resolves to ``1e-4 * spacing`` of the grid at hand.
    """

    w_hermite: float = 0.02  # weight of the edge-plane (Hermite) energy
    update_weight: float = 0.2  # blend factor for per-iteration Hermite updates
    mu: float = 0.1  # proximal regularization of each linearized step
    tau: Optional[float] = None
    max_outer: int = 100
    max_inner: int = 100
    batch_size: int = 200000
    narrow_band: Optional[float] = None  # band half-width in cell diagonals
    rng_seed: int = 0
    normalize_wh_by_count: bool = False  # scale w_hermite by per-cell sample count
    pseudo_sdf_interior: bool = False  # drop interior samples from the distance energy
    early_exit: bool = True  # stop outer loop once vertices stop moving
    threads: int = 1  # worker cap for closest-point queries (0 = all cores)

    def __post_init__(self):
        if self.w_hermite < 0 or self.mu < 0:
            raise ValueError("weights must be non-negative")
        if not (0.0 <= self.update_weight <= 1.0):
            raise ValueError("update_weight must lie in [0, 1]")
        if self.max_outer < 0 or self.max_inner < 1:
            raise ValueError("iteration caps out of range")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def effective_tau(self, grid: SdfGrid) -> float:
        return 1e-4 * grid.spacing if self.tau is None else float(self.tau)

    def effective_workers(self) -> int:
        return -1 if self.threads == 0 else int(self.threads)

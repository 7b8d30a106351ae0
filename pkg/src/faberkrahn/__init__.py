"""Faber-Krahn minimisers on two-dimensional Riemannian charts.

Charts (:mod:`.manifold`) are discretised by a finite-volume Laplace-Beltrami
operator (:mod:`.discretize`), ground states are computed by inverse
iteration (:mod:`.eigensolve`), supports of prescribed volume are optimised
in :mod:`.shapeopt` and inspected by the free-boundary checks in
:mod:`.diagnostics`. :mod:`.experiments` and :mod:`.cli` drive config-based
runs.
"""

__version__ = "0.1.0"

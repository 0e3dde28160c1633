"""Gradient descent dynamics for matrix factorization at large learning rates.

Subpackages by role: :mod:`numkit` (linear algebra, RNG, matrix I/O),
:mod:`problems` (objective families), :mod:`engine` (GD runs and orbit tools),
:mod:`theory` (closed-form bounds and per-step quantities), :mod:`stability`
(fixed-point analysis), :mod:`harness` (experiments), :mod:`cli`.
"""

__version__ = "0.1.0"

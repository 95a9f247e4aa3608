"""Hybrid high-order discretization of finite-strain elastoplasticity.

Modules: ``mesh`` and ``mesh_io`` (polygonal/polyhedral meshes), ``approximation``
(quadrature and polynomial bases), ``hho_core`` (local HHO operators),
``material`` (logarithmic-strain von Mises plasticity), ``solver`` (assembly,
static condensation, Newton load stepping) and ``config``/``driver``/``export``/
``cli`` (batch runs).
"""

__version__ = "0.1.0"

"""Transfer of axisymmetric equilibrium data onto compatible finite element spaces."""

from .mesh import Mesh2D, MeshError, build_structured_mesh, locate_point, perturb_mesh, refine_along_levelset
from .spaces import Field, FunctionSpace, SpaceKind, build_space, eval_field, eval_strong_derivative

__version__ = "0.1.0"

"""Single-image scene decomposition into posed object meshes plus a
background mesh, with pluggable stand-ins for the learned components."""
from .geometry import Camera, TriangleMesh
from .raster import DisparityGrid
from .sim3 import IcpConfig, Sim3, sim3_least_squares, trimmed_icp

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "TriangleMesh",
    "DisparityGrid",
    "IcpConfig",
    "Sim3",
    "sim3_least_squares",
    "trimmed_icp",
    "__version__",
]

"""Panorama depth estimation on icosphere meshes, in numpy."""

from .mesh import (MAX_LEVEL, SamplePattern, SphericalMesh, build_icosahedron, hierarchy,
                   icosphere, sample_pattern, subdivide, surface_area_ratio)
from .metrics import MetricReport, evaluate, evaluate_mesh
from .network import NetworkParams, build_network, forward, load_checkpoint, save_checkpoint
from .panorama import (MeshTensor, Panorama, PointCloud, depth_to_pointcloud_equirect,
                       depth_to_pointcloud_mesh, image_to_mesh, mesh_to_image, pixel_to_sphere,
                       sphere_to_pixel)

__version__ = "0.1.0"

"""Few-shot 3D pose estimation by synthesizing and matching feature-level views.

A cuboid mesh carries one feature vector per vertex; rendering those vectors
through a software rasterizer synthesizes the feature map of any pose, and
cosine matching against extracted image features drives pseudo-labelling,
contrastive training of the extractor, and render-and-compare inference.
"""

from .config import PipelineConfig
from .geometry import Camera, Pose, geodesic_error, project, rotation_from_pose
from .mesh import CuboidMesh, VertexFeatureBank, make_cuboid
from .synthdata import SceneSpec

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "CuboidMesh",
    "PipelineConfig",
    "Pose",
    "SceneSpec",
    "VertexFeatureBank",
    "geodesic_error",
    "make_cuboid",
    "project",
    "rotation_from_pose",
    "__version__",
]

"""Pipeline-level configuration shared by training, inference and checkpoints."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

from .geometry import Camera
from .mesh import CuboidMesh, make_cuboid


@dataclass(frozen=True)
class PipelineConfig:
    """Everything that must agree between a checkpoint and the code using it."""

    camera: Camera
    mesh_dims: tuple[float, float, float]
    mesh_subdivisions: int
    channels: int
    seed: int

    @classmethod
    def standard(cls, seed: int = 0) -> "PipelineConfig":
        """Defaults matching the bundled synthetic scene."""
        return cls(
            camera=Camera(scale=45.0, principal=(64.0, 64.0),
                          image_size=(128, 128), feature_stride=4),
            mesh_dims=(1.0, 0.65, 0.45),
            mesh_subdivisions=4,
            channels=16,
            seed=seed,
        )

    def make_mesh(self) -> CuboidMesh:
        return make_cuboid(self.mesh_dims, self.mesh_subdivisions)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scale": float(self.camera.scale),
            "principal": [float(v) for v in self.camera.principal],
            "image_size": [int(v) for v in self.camera.image_size],
            "feature_stride": int(self.camera.feature_stride),
            "mesh_dims": [float(v) for v in self.mesh_dims],
            "mesh_subdivisions": int(self.mesh_subdivisions),
            "channels": int(self.channels),
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PipelineConfig":
        camera = Camera(scale=float(data["scale"]),
                        principal=tuple(float(v) for v in data["principal"]),
                        image_size=tuple(int(v) for v in data["image_size"]),
                        feature_stride=int(data["feature_stride"]))
        return cls(camera=camera,
                   mesh_dims=tuple(float(v) for v in data["mesh_dims"]),
                   mesh_subdivisions=int(data["mesh_subdivisions"]),
                   channels=int(data["channels"]),
                   seed=int(data["seed"]))

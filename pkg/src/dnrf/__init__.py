"""Mesh-guided deformable neural radiance fields on a multi-resolution hash grid."""

from ._backend import BACKEND, set_num_threads
from .bvh import Bvh, build_bvh, nearest_triangle, point_triangle_distance
from .encoding import HashGrid, HashGridConfig, encode_direction, encode_position
from .geometry import (
    DeformationGradient,
    ScalingMode,
    TriangleFrame,
    TriangleMesh,
    blended_gradient,
    canonicalize,
    deformation_gradient,
    triangle_frame,
)
from .network import AdamState, Mlp, RadianceField, adam_step
from .renderer import Camera, OccupancyGrid, Ray, composite, generate_ray, march_ray, render_image
from .trainer import FrameRecord, TrainConfig, huber_loss, train, transfer_expression

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "set_num_threads", "Bvh", "build_bvh", "nearest_triangle", "point_triangle_distance",
    "HashGrid", "HashGridConfig", "encode_direction", "encode_position", "DeformationGradient",
    "ScalingMode", "TriangleFrame", "TriangleMesh", "blended_gradient", "canonicalize",
    "deformation_gradient", "triangle_frame", "AdamState", "Mlp", "RadianceField", "adam_step",
    "Camera", "OccupancyGrid", "Ray", "composite", "generate_ray", "march_ray", "render_image",
    "FrameRecord", "TrainConfig", "huber_loss", "train", "transfer_expression",
]

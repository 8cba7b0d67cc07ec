"""Seeded synthetic multi-human data generation on procedural body models."""

from .kinematics import Bone, PoseFrame, Rotation, Skeleton, Transform, fk_global_rotations, fk_joint_positions
from .retarget import BoneMap, MotionClip, WorldPose, retarget_clip, to_world_pose
from .body import BodyParams, LbsBodyModel, builtin_variant, lbs_forward, make_minibody
from .fitting import FitConfig, fit_pose_frame, fit_shape_tpose
from .placement import Footprint, PlacementConfig, SceneLayout, overlap_area, place_actor
from .camera import CameraConstraints, CameraIntrinsics, CameraRig, CapsuleProxy, distance_bounds, occlusion_ratio
from .annotation import AnnotationRecord, ProxyMaps, render_proxy_maps
from .assets import AssetCatalog, LayeredAssetConfig, SequenceSpec, sample_actor_config, sample_sequence_spec
from .pipeline import RunConfig, run_generate

__version__ = "0.1.0"

__all__ = [
    "AnnotationRecord",
    "AssetCatalog",
    "BodyParams",
    "Bone",
    "BoneMap",
    "CameraConstraints",
    "CameraIntrinsics",
    "CameraRig",
    "CapsuleProxy",
    "FitConfig",
    "Footprint",
    "LayeredAssetConfig",
    "LbsBodyModel",
    "MotionClip",
    "PlacementConfig",
    "PoseFrame",
    "ProxyMaps",
    "Rotation",
    "RunConfig",
    "SceneLayout",
    "SequenceSpec",
    "Skeleton",
    "Transform",
    "WorldPose",
    "builtin_variant",
    "distance_bounds",
    "fit_pose_frame",
    "fit_shape_tpose",
    "fk_global_rotations",
    "fk_joint_positions",
    "lbs_forward",
    "make_minibody",
    "occlusion_ratio",
    "overlap_area",
    "place_actor",
    "render_proxy_maps",
    "retarget_clip",
    "run_generate",
    "sample_actor_config",
    "sample_sequence_spec",
    "to_world_pose",
]

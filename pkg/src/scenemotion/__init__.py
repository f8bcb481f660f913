"""Text-driven human motion generation in 3D scenes.

Two stages: ground the target object named by the instruction (chat-backed
or symbolic), then generate an object-centric trajectory and complete the
motion with conditional diffusion models fed by volumetric scene sensors.
"""

from .errors import SceneMotionError
from .geometry import Aabb, box_iou, point_box_distance
from .scene import (
    DetectedObject,
    PointCloud,
    RelationParams,
    SceneGraph,
    SpatialRelation,
    build_scene_graph,
    load_detections,
    load_point_cloud,
)
from .grounding import (
    Action,
    GroundingResult,
    ParsedInstruction,
    eval_grounding,
    ground_llm,
    ground_symbolic,
    parse_instruction,
)
from .sensors import (
    SensorParams,
    build_environment_sensor,
    build_target_sensor,
    build_trajectory_sensor,
    occupancy,
    signed_distance,
)
from .motion import (
    MotionClip,
    Skeleton,
    Trajectory,
    default_skeleton,
    forward_kinematics,
    goal_distance,
    matrix_to_rot6d,
    rot6d_to_matrix,
)
from .diffusion import (
    ConditionSet,
    DenoiserConfig,
    DiffusionModel,
    NoiseSchedule,
    TrainConfig,
    build_model,
    ddpm_sample,
    load_checkpoint,
    make_schedule,
    save_checkpoint,
    text_embed,
    train,
    training_loss,
)
from .metrics import diversity, fid, motion_features, multimodality
from .pipeline import GenerationRequest, eval_run, generate, replay

__version__ = "0.1.0"

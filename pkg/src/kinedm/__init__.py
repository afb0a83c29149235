"""Joint-angle recovery for serial manipulators from 2D keypoints.

A learned lift from 2D keypoint distances to the full 3D distance matrix of
a chain's distance-geometric point set, decoded back to joint angles by
classical multidimensional scaling, anchor alignment, and a sequential
kinematic inversion.
"""

from .datasets import (
    Camera,
    SampleRecord,
    bundled_camera_path,
    generate_dataset,
    input_edm_from_2d,
    load_camera,
    make_sample,
    project_keypoints,
    read_records,
    sample_configuration,
    write_records,
)
from .distgeo import (
    EigenDecomposition,
    RigidTransform,
    align_to_anchors,
    classical_mds,
    edm_from_points,
    fit_rigid,
    gram_from_edm,
    jacobi_eigh,
    pack_upper,
    symmetric_eig,
    unpack,
)
from .estimator import JointAngleRegressor
from .gradients import loss_and_gradients, loss_config, loss_distance, loss_total
from .kinematics import (
    Frame,
    KinematicChain,
    align_reconstruction,
    angles_from_edm,
    build_point_set,
    bundled_chain_path,
    config_to_edm,
    forward_kinematics,
    load_chain,
    recover_angles,
    structural_distance_mask,
    wrap_angle,
)
from .metrics import EvalReport, evaluate, mae_angles, pearson, top_fraction_mean
from .network import MlpParams, forward, init_params
from .training import (
    Checkpoint,
    TrainConfig,
    adam_step,
    infer,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    train,
)
from .validation import (
    ChainValidationError,
    ConvergenceError,
    DegenerateGeometryError,
    SchemaError,
)

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "ChainValidationError",
    "Checkpoint",
    "ConvergenceError",
    "DegenerateGeometryError",
    "EigenDecomposition",
    "EvalReport",
    "Frame",
    "JointAngleRegressor",
    "KinematicChain",
    "MlpParams",
    "RigidTransform",
    "SampleRecord",
    "SchemaError",
    "TrainConfig",
    "adam_step",
    "align_reconstruction",
    "align_to_anchors",
    "angles_from_edm",
    "build_point_set",
    "bundled_camera_path",
    "bundled_chain_path",
    "classical_mds",
    "config_to_edm",
    "edm_from_points",
    "evaluate",
    "fit_rigid",
    "forward",
    "forward_kinematics",
    "generate_dataset",
    "gram_from_edm",
    "infer",
    "init_params",
    "input_edm_from_2d",
    "jacobi_eigh",
    "load_camera",
    "load_chain",
    "load_checkpoint",
    "loss_and_gradients",
    "loss_config",
    "loss_distance",
    "loss_total",
    "lr_schedule",
    "mae_angles",
    "make_sample",
    "pack_upper",
    "pearson",
    "project_keypoints",
    "read_records",
    "recover_angles",
    "sample_configuration",
    "save_checkpoint",
    "structural_distance_mask",
    "symmetric_eig",
    "top_fraction_mean",
    "train",
    "unpack",
    "wrap_angle",
    "write_records",
]

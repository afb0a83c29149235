"""Synthetic dataset generation and record serialization.

Samples are drawn uniformly inside the joint limits, pushed through forward
kinematics, and projected with a pinhole camera; each record stores the
ground-truth configuration, the 2D joint keypoints in pixels, per-keypoint
visibility, and the camera id. Records are serialized as one JSON object per
line. Network inputs are packed squared pixel distances divided by the
squared image diagonal, which makes them camera-resolution invariant.
"""

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .distgeo import RigidTransform
from .kinematics import build_point_set, rotation_rpy
from .validation import SchemaError, as_float_array, packed_size


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus the base-to-camera pose."""

    name: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform

    @property
    def diag_sq(self):
        """Squared image diagonal, the input normalization constant."""
        return float(self.width) ** 2 + float(self.height) ** 2

    def validate(self):
        if self.fx <= 0 or self.fy <= 0:
            raise SchemaError(f"camera {self.name}: focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise SchemaError(f"camera {self.name}: image size must be positive")
        return self


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)):
    """Base-to-camera pose for a camera at ``position`` looking at ``target``.

    Camera convention: +z optical axis, +x image right, +y image down.
    """
    position = as_float_array(position, "position", (3,))
    target = as_float_array(target, "target", (3,))
    up = as_float_array(up, "up", (3,))
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera position and target coincide")
    z = forward / norm
    x = np.cross(z, up)
    xn = np.linalg.norm(x)
    if xn < 1e-12:
        raise ValueError("camera viewing direction is parallel to the up vector")
    x = x / xn
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    return RigidTransform(rotation=rot, translation=-rot @ position)


def camera_from_dict(data, source="camera", name=None):
    try:
        pose = data["pose"]
        rot = rotation_rpy(*as_float_array(pose["rpy"], "pose.rpy", (3,)))
        trans = as_float_array(pose["translation"], "pose.translation", (3,))
        cam = Camera(
            name=str(data.get("name", name or "camera")),
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            width=int(data["width"]),
            height=int(data["height"]),
            pose=RigidTransform(rotation=rot, translation=trans),
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{source}: missing camera field {exc}") from exc
    except ValueError as exc:
        raise SchemaError(f"{source}: {exc}") from exc
    return cam.validate()


def load_camera(path):
    """Load a camera description from a JSON file (name defaults to the stem)."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return camera_from_dict(data, source=str(path), name=path.stem)


def bundled_camera_path(name="camera0"):
    return str(resources.files("kinedm").joinpath(f"data/{name}.json"))


def sample_configuration(chain, rng):
    """One configuration drawn uniformly inside the joint limits."""
    return rng.uniform(chain.limits[:, 0], chain.limits[:, 1])


def project_keypoints(camera, points):
    """Pinhole projection of base-frame points.

    Returns (pixel coordinates, visibility). A point is visible when it lies
    in front of the camera and inside the image bounds; points behind the
    camera get placeholder coordinates that consumers must ignore.
    """
    points = as_float_array(points, "points")
    cam_pts = points @ camera.pose.rotation.T + camera.pose.translation
    z = cam_pts[:, 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    u = camera.fx * cam_pts[:, 0] / safe_z + camera.cx
    v = camera.fy * cam_pts[:, 1] / safe_z + camera.cy
    u = np.where(in_front, u, 0.0)
    v = np.where(in_front, v, 0.0)
    visible = (
        in_front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    )
    return np.column_stack([u, v]), visible


def input_edm_from_2d(kp2d, diag_sq):
    """Packed squared pixel distances normalized by the squared image diagonal."""
    kp2d = as_float_array(kp2d, "kp2d")
    if kp2d.ndim != 2 or kp2d.shape[1] != 2:
        raise ValueError(f"kp2d: expected (n, 2), got shape {kp2d.shape}")
    if diag_sq <= 0:
        raise ValueError("diag_sq must be positive")
    diff = kp2d[:, None, :] - kp2d[None, :, :]
    d = np.einsum("ijk,ijk->ij", diff, diff) / diag_sq
    iu = np.triu_indices(kp2d.shape[0], k=1)
    return d[iu]


@dataclass
class SampleRecord:
    """One dataset item: configuration, 2D keypoints, visibility, camera id."""

    theta: np.ndarray
    kp2d: np.ndarray
    visible: np.ndarray
    camera_id: str

    def to_json(self):
        return json.dumps(
            {
                "theta": [float(t) for t in self.theta],
                "kp2d": [[float(u), float(v)] for u, v in self.kp2d],
                "visible": [bool(b) for b in self.visible],
                "camera_id": self.camera_id,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_dict(cls, data, source="record"):
        try:
            theta = as_float_array(data["theta"], "theta")
            kp2d = as_float_array(data["kp2d"], "kp2d")
            visible = np.asarray(data["visible"], dtype=bool)
            camera_id = str(data["camera_id"])
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"{source}: missing field {exc}") from exc
        except ValueError as exc:
            raise SchemaError(f"{source}: {exc}") from exc
        if theta.ndim != 1 or kp2d.shape != (theta.size, 2):
            raise SchemaError(
                f"{source}: kp2d shape {kp2d.shape} does not match "
                f"{theta.size} joints"
            )
        if visible.shape != (theta.size,):
            raise SchemaError(f"{source}: visible length mismatch")
        return cls(theta=theta, kp2d=kp2d, visible=visible, camera_id=camera_id)


def make_sample(chain, camera, theta):
    """Project the joint keypoints [p_1 .. p_n] of one configuration.

    Only the physical joint points are observed in the image; the base triple
    and the axis markers exist solely in the distance model.
    """
    theta = as_float_array(theta, "theta", (chain.n_joints,))
    pts = build_point_set(chain, theta)
    kp2d, visible = project_keypoints(camera, pts[chain.keypoint_indices])
    return SampleRecord(
        theta=theta, kp2d=kp2d, visible=visible, camera_id=camera.name
    )


def generate_dataset(chain, cameras, count, seed, pixel_noise=0.0):
    """Deterministically generate ``count`` samples.

    Sample i derives its own random stream from (seed, i), so generation is
    order-independent and reproducible. With several cameras each sample
    picks one uniformly. Optional isotropic pixel noise perturbs keypoints
    after projection (visibility is decided on the clean projection).
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    cameras = list(cameras)
    records = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        cam = cameras[rng.integers(len(cameras))] if len(cameras) > 1 else cameras[0]
        record = make_sample(chain, cam, sample_configuration(chain, rng))
        if pixel_noise > 0:
            record.kp2d = record.kp2d + rng.normal(0, pixel_noise, record.kp2d.shape)
        records.append(record)
    return records


def write_records(path, records):
    """Write records as line-delimited JSON."""
    with open(path, "w") as fh:
        for record in records:
            fh.write(record.to_json())
            fh.write("\n")


def read_records(path, chain=None):
    """Read line-delimited records, validating the schema (and the joint
    count against ``chain`` when given); errors name the offending line."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: not valid JSON ({exc})") from exc
            record = SampleRecord.from_dict(data, source=f"{path}:{lineno}")
            if chain is not None and record.theta.size != chain.n_joints:
                raise SchemaError(
                    f"{path}:{lineno}: record has {record.theta.size} joints, "
                    f"chain {chain.name!r} has {chain.n_joints}"
                )
            records.append(record)
    return records


def inputs_from_records(records, normalizers):
    """Network inputs (and metadata arrays) for a list of records.

    ``normalizers`` maps camera id to the squared image diagonal; a bare
    float applies to every record. Returns (X, thetas, all_visible).
    """
    xs, thetas, fully_visible = [], [], []
    for record in records:
        if isinstance(normalizers, dict):
            if record.camera_id not in normalizers:
                raise SchemaError(
                    f"no normalizer for camera {record.camera_id!r}; "
                    "supply its camera file"
                )
            diag_sq = normalizers[record.camera_id]
        else:
            diag_sq = float(normalizers)
        xs.append(input_edm_from_2d(record.kp2d, diag_sq))
        thetas.append(record.theta)
        fully_visible.append(bool(record.visible.all()))
    n = len(records)
    width = packed_size(records[0].theta.size) if records else 0
    return (
        np.asarray(xs).reshape(n, width),
        np.asarray(thetas),
        np.asarray(fully_visible, dtype=bool),
    )

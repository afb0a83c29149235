"""Kinematic chain model and its distance-geometric point set.

A chain of n single-axis revolute joints, each rotating about its local z
axis. Joint i (1-based) carries a fixed relative translation and rotation
from frame i-1, so frame i follows from frame i-1 as

    R_i = R_{i-1} Rz(theta_i) E_i,      o_i = o_{i-1} + R_{i-1} Rz(theta_i) u_i

with (u_i, E_i) the structural offset. The distance-geometric point set has
2n+2 members in the fixed order

    [x, y, p_0, p_1, q_1, ..., p_{n-1}, q_{n-1}, p_n]

where x, y sit at unit distance along the base axes, p_i is the origin of
frame i, q_i = p_i + R_i z is the unit axis marker of joint i+1, and p_n is
an end-effector point held off the last axis so the final angle stays
observable.
"""

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .distgeo import (
    MIRROR_SIGNS,
    RigidTransform,
    align_to_anchors,
    classical_mds,
    edm_from_points,
)
from .validation import (
    ChainValidationError,
    DegenerateGeometryError,
    SchemaError,
    as_float_array,
    check_rotation,
)

Z_AXIS = np.array([0.0, 0.0, 1.0])

# xy-norm below which a candidate reference point sits on the joint axis and
# carries no angle information
OBSERVABILITY_TOL = 1e-6
# far tighter cutoff used when classifying structurally fixed EDM entries
AXIS_TOL = 1e-8

BASE_ANCHOR_INDICES = (0, 1, 2)
BASE_ANCHOR_TARGETS = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])

_FLIP_Z = np.diag([1.0, 1.0, -1.0])


def rotation_rpy(roll, pitch, yaw):
    """Rotation matrix for extrinsic x-y-z (roll, pitch, yaw) angles."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def wrap_angle(theta):
    """Wrap to the half-open interval (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(theta), 2.0 * np.pi)


def snap_to_limits(wrapped, lower, upper):
    """Pick the 2-pi-shifted representative of a wrapped angle closest to the
    limit interval (needed when limits extend beyond (-pi, pi])."""
    if -np.pi <= lower and upper <= np.pi:
        return wrapped
    k_min = int(np.floor((lower - wrapped) / (2 * np.pi)))
    k_max = int(np.ceil((upper - wrapped) / (2 * np.pi)))
    best, best_dist = wrapped, np.inf
    for k in range(k_min, k_max + 1):
        cand = wrapped + 2 * np.pi * k
        dist = max(lower - cand, cand - upper, 0.0)
        if dist < best_dist - 1e-15:
            best, best_dist = cand, dist
    return best


@dataclass(frozen=True)
class Frame:
    """Pose of one joint frame: orthonormal rotation and origin in meters."""

    rotation: np.ndarray
    origin: np.ndarray

    @classmethod
    def identity(cls):
        return cls(rotation=np.eye(3), origin=np.zeros(3))


@dataclass(frozen=True)
class _RecoveryStep:
    """Per-joint plan for angle recovery: which observed point to use and the
    structural reference direction it is compared against."""

    point_index: int
    use_axis_marker: bool
    reference: np.ndarray
    reference_angle: float


@dataclass
class KinematicChain:
    """Structural model of an n-joint revolute chain.

    translations: (n, 3) relative offsets u_i; rotations: (n, 3, 3) relative
    rotations E_i; limits: (n, 2) joint ranges in radians; ee_offset locates
    the end-effector point in the last frame.
    """

    name: str
    translations: np.ndarray
    rotations: np.ndarray
    limits: np.ndarray
    ee_offset: np.ndarray
    _recovery: list = field(default_factory=list, repr=False)

    @property
    def n_joints(self):
        return self.translations.shape[0]

    @property
    def n_points(self):
        return 2 * self.n_joints + 2

    @property
    def keypoint_indices(self):
        """Point-set rows of the joint keypoints [p_1 .. p_n]."""
        return [2 * i + 1 for i in range(1, self.n_joints + 1)]

    def ee_reference(self):
        """End-effector point expressed in frame n-1 at zero final angle."""
        return self.translations[-1] + self.rotations[-1] @ self.ee_offset

    def within_limits(self, theta):
        theta = as_float_array(theta, "theta", shape=(self.n_joints,))
        return bool(
            np.all(theta >= self.limits[:, 0]) and np.all(theta <= self.limits[:, 1])
        )

    def validate(self):
        """Check all structural invariants; raises ChainValidationError."""
        n = self.n_joints
        if n < 1:
            raise ChainValidationError("chain needs at least one joint")
        for i in range(n):
            try:
                check_rotation(self.rotations[i], f"joint {i + 1} rotation")
            except ValueError as exc:
                raise ChainValidationError(str(exc)) from exc
            lo, hi = self.limits[i]
            if not lo < hi:
                raise ChainValidationError(
                    f"joint {i + 1}: lower limit {lo} must be below upper limit {hi}"
                )
        for i in range(n - 1):
            u = self.translations[i]
            q = u + self.rotations[i] @ Z_AXIS
            if (
                np.hypot(u[0], u[1]) <= OBSERVABILITY_TOL
                and np.hypot(q[0], q[1]) <= OBSERVABILITY_TOL
            ):
                raise ChainValidationError(
                    f"joint {i + 1} unobservable: both its frame origin and axis "
                    "marker lie on the joint axis"
                )
        w = self.ee_reference()
        if np.hypot(w[0], w[1]) <= OBSERVABILITY_TOL:
            raise ChainValidationError(
                f"joint {n} unobservable: end-effector point lies on the joint axis"
            )
        self._build_recovery_plan()
        return self

    def _build_recovery_plan(self):
        steps = []
        n = self.n_joints
        for i in range(n - 1):
            u = self.translations[i]
            if np.hypot(u[0], u[1]) > OBSERVABILITY_TOL:
                w, use_q, idx = u, False, 2 * (i + 1) + 1
            else:
                w, use_q, idx = u + self.rotations[i] @ Z_AXIS, True, 2 * (i + 1) + 2
            steps.append(
                _RecoveryStep(
                    point_index=idx,
                    use_axis_marker=use_q,
                    reference=w,
                    reference_angle=float(np.arctan2(w[1], w[0])),
                )
            )
        w = self.ee_reference()
        steps.append(
            _RecoveryStep(
                point_index=2 * n + 1,
                use_axis_marker=False,
                reference=w,
                reference_angle=float(np.arctan2(w[1], w[0])),
            )
        )
        self._recovery = steps


def chain_from_dict(data, source="chain"):
    """Build and validate a KinematicChain from the documented mapping schema."""
    try:
        name = data["name"]
        joints = data["joints"]
        ee_offset = data["ee_offset"]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{source}: missing field {exc}") from exc
    if not isinstance(joints, list) or not joints:
        raise SchemaError(f"{source}: 'joints' must be a nonempty list")
    translations, rotations, limits = [], [], []
    for k, joint in enumerate(joints):
        try:
            translations.append(
                as_float_array(joint["translation"], f"joint {k + 1} translation", (3,))
            )
            rotations.append(rotation_rpy(*as_float_array(
                joint["rotation_rpy"], f"joint {k + 1} rotation_rpy", (3,)
            )))
            limits.append(as_float_array(joint["limits"], f"joint {k + 1} limits", (2,)))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"{source}: joint {k + 1} missing field {exc}") from exc
        except ValueError as exc:
            raise SchemaError(f"{source}: {exc}") from exc
    chain = KinematicChain(
        name=str(name),
        translations=np.array(translations),
        rotations=np.array(rotations),
        limits=np.array(limits),
        ee_offset=as_float_array(ee_offset, "ee_offset", (3,)),
    )
    return chain.validate()


def load_chain(path):
    """Load and validate a chain description from a JSON file."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return chain_from_dict(data, source=str(path))


def bundled_chain_path(name="panda7"):
    """Filesystem path of a chain fixture shipped with the package."""
    return str(resources.files("kinedm").joinpath(f"data/{name}.json"))


def forward_kinematics(chain, theta):
    """Frames 0..n of the chain at configuration theta (frame 0 is the base)."""
    theta = as_float_array(theta, "theta", shape=(chain.n_joints,))
    frames = [Frame.identity()]
    rot = np.eye(3)
    origin = np.zeros(3)
    for i in range(chain.n_joints):
        step = rot @ rot_z(theta[i])
        origin = origin + step @ chain.translations[i]
        rot = step @ chain.rotations[i]
        frames.append(Frame(rotation=rot, origin=origin))
    return frames


def build_point_set(chain, theta):
    """The (2n+2, 3) distance-geometric point set for configuration theta."""
    frames = forward_kinematics(chain, theta)
    n = chain.n_joints
    pts = np.empty((chain.n_points, 3))
    pts[0] = [1.0, 0.0, 0.0]
    pts[1] = [0.0, 1.0, 0.0]
    pts[2] = [0.0, 0.0, 0.0]
    for i in range(1, n):
        pts[2 * i + 1] = frames[i].origin
        pts[2 * i + 2] = frames[i].origin + frames[i].rotation @ Z_AXIS
    pts[2 * n + 1] = frames[n].origin + frames[n].rotation @ chain.ee_offset
    return pts


def config_to_edm(chain, theta):
    """Squared EDM of the point set at configuration theta."""
    return edm_from_points(build_point_set(chain, theta))


def _sq(v):
    return float(v @ v)


def structural_distance_mask(chain):
    """EDM entries that are constant over the whole configuration space.

    Returns a set of (row, col, squared distance) with row < col: the base
    triple, base-to-first-joint entries whenever the first joint's points sit
    on its rotation axis, each p_i-q_i unit pair, and all neighbour pairs,
    whose distances follow from the structural offsets alone.
    """
    n = chain.n_joints
    x_hat, y_hat = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    entries = {(0, 1, 2.0), (0, 2, 1.0), (1, 2, 1.0)}

    # first joint against the base triple; p_0 sits on the axis so its
    # distances are always fixed, x and y only when the moving point is
    u1 = chain.translations[0]
    first = [(2 * 1 + 1, u1 if n > 1 else u1 + chain.rotations[0] @ chain.ee_offset)]
    if n > 1:
        first.append((2 * 1 + 2, u1 + chain.rotations[0] @ Z_AXIS))
    for idx, pt in first:
        entries.add((2, idx, _sq(pt)))
        if np.hypot(pt[0], pt[1]) < AXIS_TOL:
            entries.add((0, idx, _sq(pt - x_hat)))
            entries.add((1, idx, _sq(pt - y_hat)))

    for i in range(1, n):
        entries.add((2 * i + 1, 2 * i + 2, 1.0))

    for i in range(1, n - 1):
        # joint i pair against joint i+1 pair, all expressed in frame i
        w = chain.translations[i]
        fz = chain.rotations[i] @ Z_AXIS
        p_i, q_i = 2 * i + 1, 2 * i + 2
        p_j, q_j = 2 * i + 3, 2 * i + 4
        entries.add((p_i, p_j, _sq(w)))
        entries.add((p_i, q_j, _sq(w + fz)))
        entries.add((q_i, p_j, _sq(w - Z_AXIS)))
        entries.add((q_i, q_j, _sq(w - Z_AXIS + fz)))
    if n > 1:
        w = chain.ee_reference()
        p_prev, q_prev, p_n = 2 * n - 1, 2 * n, 2 * n + 1
        entries.add((p_prev, p_n, _sq(w)))
        entries.add((q_prev, p_n, _sq(w - Z_AXIS)))
    return entries


def recover_angles(points, chain, base=None):
    """Joint angles from a base-frame point set (sequential frame inversion).

    Walks the chain from the base: with frame i-1 known, the observed point
    for joint i is expressed in frame i-1 and its in-plane angle is compared
    with the structural reference direction; the recovered angle then
    propagates frame i analytically. Angles are wrapped to (-pi, pi] and
    snapped toward the joint's limit interval when that extends further.

    ``base`` overrides the identity base frame, making recovery equivariant
    to rigid motions applied to both the points and the base.
    """
    n = chain.n_joints
    pts = as_float_array(points, "points", shape=(chain.n_points, 3))
    if not chain._recovery:
        chain._build_recovery_plan()
    rot = np.eye(3) if base is None else base.rotation
    origin = np.zeros(3) if base is None else base.origin
    theta = np.empty(n)
    for i, step in enumerate(chain._recovery):
        v = rot.T @ (pts[step.point_index] - origin)
        if np.hypot(v[0], v[1]) <= OBSERVABILITY_TOL:
            raise DegenerateGeometryError(
                f"joint {i + 1}: observed point lies on the rotation axis"
            )
        angle = wrap_angle(np.arctan2(v[1], v[0]) - step.reference_angle)
        theta[i] = snap_to_limits(angle, *chain.limits[i])
        if i < n - 1:
            advance = rot @ rot_z(theta[i])
            origin = origin + advance @ chain.translations[i]
            rot = advance @ chain.rotations[i]
    return theta


def _rebuild_mismatch(points, chain):
    try:
        theta = recover_angles(points, chain)
    except DegenerateGeometryError:
        return np.inf, None
    diff = build_point_set(chain, theta) - points
    return float(np.einsum("ij,ij->", diff, diff)), theta


def _align_decode(points, chain):
    """Anchor-align, resolve chirality through the chain, and recover angles."""
    aligned, tf = align_to_anchors(points, BASE_ANCHOR_INDICES, BASE_ANCHOR_TARGETS)
    res_plain, theta_plain = _rebuild_mismatch(aligned, chain)
    flipped = aligned * np.array([1.0, 1.0, -1.0])
    res_flip, theta_flip = _rebuild_mismatch(flipped, chain)
    if theta_plain is None and theta_flip is None:
        raise DegenerateGeometryError(
            "angle recovery failed for both chirality interpretations"
        )
    if res_flip >= res_plain:
        return aligned, tf, theta_plain
    # compose the extra reflection through the anchor plane into the pre-mirror
    # convention: Mz (R x + t) == (Mz R Mpre)(Mpre x) + Mz t; an existing
    # pre-mirror cancels against the new reflection, flipping the flag back
    pre = np.diag(MIRROR_SIGNS)
    mirrored_tf = RigidTransform(
        rotation=_FLIP_Z @ tf.rotation @ pre,
        translation=_FLIP_Z @ tf.translation,
        mirrored=not tf.mirrored,
    )
    return flipped, mirrored_tf, theta_flip


def align_reconstruction(points, chain):
    """Anchor-align a reconstructed point set and resolve its chirality.

    The base anchors {x, y, p_0} fix translation and rotation but, being
    coplanar, cannot see a reflection. Both chirality interpretations are
    therefore decoded through the chain and the one whose rebuilt point set
    better explains the input wins; a mirrored winner flags the returned
    transform and reflects the output through the anchor plane.

    Returns (aligned points, RigidTransform).
    """
    aligned, tf, _ = _align_decode(points, chain)
    return aligned, tf


def angles_from_edm(d, chain):
    """Decode a full squared EDM into joint angles.

    Runs classical MDS, aligns the embedding to the base anchors with
    chirality resolution, and inverts the kinematics sequentially. Returns
    (configuration, RigidTransform of the alignment).
    """
    points = classical_mds(d, 3)
    _, tf, theta = _align_decode(points, chain)
    if theta is None:
        raise DegenerateGeometryError("EDM decoded to a degenerate point set")
    return theta, tf

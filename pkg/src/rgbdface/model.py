"""Multilinear blendshape face model: tensor contraction, blendshapes,
rigid transforms and pinhole projection.

Conventions: the camera looks down +z, image y points down, 3D lengths are
meters and 2D lengths are pixels. A tracked 2D landmark is recovered from
shape parameters as ``l_i = project(S_i) - D_i``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class BehindCameraError(ValueError):
    """A point with z <= 0 was handed to the pinhole projection."""


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReducedCoreTensor:
    """Core tensor of shape (3*N_v, N_id, N_e), rows ordered vertex-major.

    ``exp_basis[j]`` is the expression-mode weight vector u_exp_j; row 0 is
    the neutral expression. ``id_mean`` is the identity used when nothing
    better is known (defaults to the uniform vector).
    """
    data: np.ndarray
    exp_basis: np.ndarray
    id_mean: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1 or data.shape[0] % 3:
            raise ValueError(f"core tensor must be (3*N_v, N_id, N_e), got {data.shape}")
        n_e = data.shape[2]
        basis = np.asarray(self.exp_basis, dtype=np.float64)
        if basis.shape != (n_e, n_e):
            raise ValueError(f"exp_basis must be ({n_e}, {n_e}), got {basis.shape}")
        mean = self.id_mean
        if mean is None:
            mean = np.full(data.shape[1], 1.0 / data.shape[1])
        mean = np.asarray(mean, dtype=np.float64)
        if mean.shape != (data.shape[1],):
            raise ValueError("id_mean length must equal N_id")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "exp_basis", _frozen(basis))
        object.__setattr__(self, "id_mean", _frozen(mean))

    @property
    def n_vertices(self) -> int:
        return self.data.shape[0] // 3

    @property
    def n_id(self) -> int:
        return self.data.shape[1]

    @property
    def n_exp(self) -> int:
        return self.data.shape[2]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.n_vertices, self.n_id, self.n_exp

    def vertex_rows(self, vertices) -> np.ndarray:
        """Sub-tensor (len(vertices), 3, N_id, N_e) for the given vertices."""
        v = self.data.reshape(self.n_vertices, 3, self.n_id, self.n_exp)
        return v[np.asarray(vertices)]

    def gamma(self, e) -> np.ndarray:
        """Expression-mode vector (1 - sum e) u_0 + sum e_j u_j."""
        e = np.asarray(e, dtype=np.float64)
        if e.shape != (self.n_exp - 1,):
            raise ValueError(f"expected {self.n_exp - 1} expression weights, got {e.shape}")
        u = self.exp_basis
        return u[0] + e @ (u[1:] - u[0])


@dataclass(frozen=True)
class MeshTopology:
    triangles: np.ndarray
    landmark_vertices: np.ndarray
    n_vertices: int

    def __post_init__(self):
        tri = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        lm = np.asarray(self.landmark_vertices, dtype=np.int64).ravel()
        nv = int(self.n_vertices)
        if tri.size and (tri.min() < 0 or tri.max() >= nv):
            raise ValueError("triangle index out of range")
        if lm.size == 0 or lm.min() < 0 or lm.max() >= nv:
            raise ValueError("landmark index out of range")
        if len(np.unique(lm)) != len(lm):
            raise ValueError("landmark vertices must be distinct")
        object.__setattr__(self, "triangles", _frozen(tri, np.int64))
        object.__setattr__(self, "landmark_vertices", _frozen(lm, np.int64))
        object.__setattr__(self, "n_vertices", nv)

    @property
    def n_landmarks(self) -> int:
        return len(self.landmark_vertices)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 525.0
    fy: float = 525.0
    cx: float = 319.5
    cy: float = 239.5
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def size(self) -> tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True)
class RigidPose:
    """Axis-angle rotation (radians) and translation (meters)."""
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3,) or t.shape != (3,):
            raise ValueError("rotation and translation must be 3-vectors")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose must be finite")
        if np.linalg.norm(r) >= np.pi:
            r = canonical_rotvec(r)
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @property
    def matrix(self) -> np.ndarray:
        return rotation_matrix(self.rotation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """Pose of ``self ∘ other`` (apply ``other`` first)."""
        R = self.matrix @ other.matrix
        return RigidPose(rotvec_from_matrix(R), self.matrix @ other.translation + self.translation)


@dataclass(frozen=True)
class BlendshapeSet:
    shapes: np.ndarray              # (N_e, N_v, 3), shapes[0] neutral
    topology: MeshTopology | None = None

    def __post_init__(self):
        s = np.asarray(self.shapes, dtype=np.float64)
        if s.ndim != 3 or s.shape[2] != 3:
            raise ValueError("blendshapes must be (N_e, N_v, 3)")
        if self.topology is not None and s.shape[1] != self.topology.n_vertices:
            raise ValueError("blendshape vertex count does not match topology")
        object.__setattr__(self, "shapes", _frozen(s))

    @property
    def n_exp(self) -> int:
        return self.shapes.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.shapes.shape[1]

    @property
    def deltas(self) -> np.ndarray:
        return self.shapes[1:] - self.shapes[0]


@dataclass(frozen=True)
class ShapeParams:
    """P = (R, T, e, D)."""
    pose: RigidPose
    expr: np.ndarray
    displacements: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.expr, dtype=np.float64).ravel()
        d = np.asarray(self.displacements, dtype=np.float64).reshape(-1, 2)
        if np.any(e < 0.0) or np.any(e > 1.0):
            raise ValueError("expression weights must lie in [0, 1]")
        object.__setattr__(self, "expr", _frozen(e))
        object.__setattr__(self, "displacements", _frozen(d))

    @property
    def theta(self) -> np.ndarray:
        """(rotation, translation, e) as one flat vector."""
        return np.concatenate([self.pose.rotation, self.pose.translation, self.expr])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.displacements.ravel()])

    @classmethod
    def from_vector(cls, vec, n_expr: int, clamp: bool = True) -> "ShapeParams":
        vec = np.asarray(vec, dtype=np.float64)
        e = vec[6:6 + n_expr]
        if clamp:
            e = np.clip(e, 0.0, 1.0)
        return cls(RigidPose(vec[:3], vec[3:6]), e, vec[6 + n_expr:].reshape(-1, 2))

    @classmethod
    def from_theta(cls, theta, displacements) -> "ShapeParams":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(RigidPose(theta[:3], theta[3:6]), theta[6:], displacements)

    def replace(self, pose=None, expr=None, displacements=None) -> "ShapeParams":
        return ShapeParams(self.pose if pose is None else pose,
                           self.expr if expr is None else expr,
                           self.displacements if displacements is None else displacements)


# ---------------------------------------------------------------------------
# Rotation helpers
# ---------------------------------------------------------------------------

def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v) -> np.ndarray:
    v = np.asarray(v)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rotation_matrix(rotvec) -> np.ndarray:
    """Rodrigues formula."""
    w = np.asarray(rotvec, dtype=np.float64)
    th = np.linalg.norm(w)
    K = skew(w)
    if th < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(th) / th * K + (1.0 - np.cos(th)) / th ** 2 * K @ K


def left_jacobian(rotvec) -> np.ndarray:
    """J_l such that R(w + dw) ~ exp(J_l(w) dw) R(w)."""
    w = np.asarray(rotvec, dtype=np.float64)
    th = np.linalg.norm(w)
    K = skew(w)
    if th < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (np.eye(3) + (1.0 - np.cos(th)) / th ** 2 * K
            + (th - np.sin(th)) / th ** 3 * K @ K)


def rotvec_from_matrix(R) -> np.ndarray:
    from scipy.spatial.transform import Rotation
    return Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_rotvec()


def canonical_rotvec(rotvec) -> np.ndarray:
    return rotvec_from_matrix(rotation_matrix(rotvec))


def rotated_point_jacobian(rotvec, rotated) -> np.ndarray:
    """d(R(w) v)/dw for points already rotated (``rotated = R v``), (N, 3, 3)."""
    return -skew_batch(rotated) @ left_jacobian(rotvec)


# ---------------------------------------------------------------------------
# Model operations
# ---------------------------------------------------------------------------

def contract(tensor: ReducedCoreTensor, w_id, w_exp) -> np.ndarray:
    """V = C_r x_2 w_id x_3 w_exp, returned as (N_v, 3)."""
    w_id = np.asarray(w_id, dtype=np.float64)
    w_exp = np.asarray(w_exp, dtype=np.float64)
    if w_id.shape != (tensor.n_id,):
        raise ValueError(f"w_id must have length {tensor.n_id}, got {w_id.shape}")
    if w_exp.shape != (tensor.n_exp,):
        raise ValueError(f"w_exp must have length {tensor.n_exp}, got {w_exp.shape}")
    return ((tensor.data @ w_exp) @ w_id).reshape(-1, 3)


def identity_slice(tensor: ReducedCoreTensor, w_id) -> np.ndarray:
    """C_r x_2 w_id as a (3*N_v, N_e) matrix."""
    w_id = np.asarray(w_id, dtype=np.float64)
    if w_id.shape != (tensor.n_id,):
        raise ValueError(f"w_id must have length {tensor.n_id}, got {w_id.shape}")
    return np.tensordot(tensor.data, w_id, axes=([1], [0]))


def build_blendshapes(tensor: ReducedCoreTensor, w_id,
                      topology: MeshTopology | None = None) -> BlendshapeSet:
    """B_j = C_r x_2 w_id x_3 u_exp_j for every expression mode."""
    M = identity_slice(tensor, w_id) @ tensor.exp_basis.T      # (3N_v, N_e)
    shapes = M.T.reshape(tensor.n_exp, tensor.n_vertices, 3)
    return BlendshapeSet(shapes, topology)


def _blend_unchecked(shapes: BlendshapeSet, e) -> np.ndarray:
    return shapes.shapes[0] + np.tensordot(e, shapes.deltas, axes=1)


def blend(shapes: BlendshapeSet, e) -> np.ndarray:
    """V = B_0 + sum_j (B_j - B_0) e_j with e in [0, 1]."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (shapes.n_exp - 1,):
        raise ValueError(f"expected {shapes.n_exp - 1} expression weights, got {e.shape}")
    if np.any(e < 0.0) or np.any(e > 1.0):
        raise ValueError("expression weights must lie in [0, 1]")
    return _blend_unchecked(shapes, e)


def transform(V, pose: RigidPose) -> np.ndarray:
    """S = R V + T, row-wise."""
    return np.asarray(V, dtype=np.float64) @ pose.matrix.T + pose.translation


def project(K: CameraIntrinsics, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point at or behind the camera plane")
    return np.stack([K.cx + K.fx * p[..., 0] / z, K.cy + K.fy * p[..., 1] / z], axis=-1)


def backproject(K: CameraIntrinsics, u, v, z) -> np.ndarray:
    u, v, z = (np.asarray(a, dtype=np.float64) for a in (u, v, z))
    return np.stack([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z], axis=-1)


def projection_jacobian(K: CameraIntrinsics, p) -> np.ndarray:
    """d project / d p for (N, 3) points -> (N, 2, 3)."""
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    J = np.zeros((len(p), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / z ** 2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / z ** 2
    return J


def landmark_positions_2d(shapes: BlendshapeSet, params: ShapeParams,
                          K: CameraIntrinsics, topology: MeshTopology | None = None) -> np.ndarray:
    topology = topology or shapes.topology
    V = _blend_unchecked(shapes, params.expr)[topology.landmark_vertices]
    return project(K, transform(V, params.pose)) - params.displacements


def vertex_normals(S, triangles) -> np.ndarray:
    """Area-weighted unit vertex normals; zero for unreferenced vertices."""
    S = np.asarray(S, dtype=np.float64)
    tri = np.asarray(triangles)
    fn = np.cross(S[tri[:, 1]] - S[tri[:, 0]], S[tri[:, 2]] - S[tri[:, 0]])
    n = np.zeros_like(S)
    for k in range(3):
        np.add.at(n, tri[:, k], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

_BTCT_MAGIC = b"BTCT"
_BTCT_VERSION = 1


def save_core_tensor(path, tensor: ReducedCoreTensor) -> None:
    """Little-endian: magic, u32 version, u32 dims, float64 data, float64 basis,
    then an N_id float64 trailer holding the mean identity."""
    nv, nid, ne = tensor.dims
    with open(path, "wb") as f:
        f.write(_BTCT_MAGIC)
        f.write(struct.pack("<4I", _BTCT_VERSION, nv, nid, ne))
        f.write(tensor.data.astype("<f8").tobytes(order="C"))
        f.write(tensor.exp_basis.astype("<f8").tobytes(order="C"))
        f.write(tensor.id_mean.astype("<f8").tobytes())


def load_core_tensor(path) -> ReducedCoreTensor:
    raw = Path(path).read_bytes()
    if raw[:4] != _BTCT_MAGIC:
        raise ValueError(f"{path}: not a core tensor file")
    version, nv, nid, ne = struct.unpack_from("<4I", raw, 4)
    if version != _BTCT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 20
    n = 3 * nv * nid * ne
    data = np.frombuffer(raw, "<f8", n, off).reshape(3 * nv, nid, ne)
    off += 8 * n
    basis = np.frombuffer(raw, "<f8", ne * ne, off).reshape(ne, ne)
    off += 8 * ne * ne
    mean = np.frombuffer(raw, "<f8", nid, off) if len(raw) >= off + 8 * nid else None
    return ReducedCoreTensor(data, basis, mean)


def save_topology(path, topology: MeshTopology) -> None:
    lines = [f"vertices {topology.n_vertices}", f"triangles {len(topology.triangles)}"]
    lines += [f"{a} {b} {c}" for a, b, c in topology.triangles]
    lines.append(f"landmarks {topology.n_landmarks}")
    lines += [str(i) for i in topology.landmark_vertices]
    Path(path).write_text("\n".join(lines) + "\n")


def load_topology(path) -> MeshTopology:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    nv = int(lines[0].split()[1])
    nt = int(lines[1].split()[1])
    tri = [list(map(int, ln.split())) for ln in lines[2:2 + nt]]
    nl = int(lines[2 + nt].split()[1])
    lm = [int(ln) for ln in lines[3 + nt:3 + nt + nl]]
    return MeshTopology(np.array(tri, dtype=np.int64).reshape(-1, 3), lm, nv)


def save_intrinsics(path, K: CameraIntrinsics) -> None:
    Path(path).write_text("".join(f"{k} = {getattr(K, k)!r}\n"
                                  for k in ("fx", "fy", "cx", "cy", "width", "height")))


def load_intrinsics(path) -> CameraIntrinsics:
    vals = {}
    for ln in Path(path).read_text().splitlines():
        ln = ln.split("#", 1)[0].strip()
        if ln:
            k, v = (s.strip() for s in ln.split("=", 1))
            vals[k] = v
    return CameraIntrinsics(float(vals["fx"]), float(vals["fy"]), float(vals["cx"]),
                            float(vals["cy"]), int(vals["width"]), int(vals["height"]))

"""Face-prior depth recovery.

The recovered depth X minimizes

    E_r(X) + lam_d * 1/2 ||X - Z||^2 + lam_f * 1/2 ||X - V||^2,
    E_r(X) = 1/2 sum_i sum_{j in W_i} a_ij (X_i - X_j)^2,

where Z is the raw depth, V the depth of the tracked face model rendered
from the color camera, and a_ij normalized joint trilateral weights over a
square window W_i computed once from the color image and Z. The solver is
the Jacobi iteration of the vanishing-gradient condition, which lowers the
energy at every step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import to_gray
from .model import CameraIntrinsics
from .raster import rasterize


@dataclass(frozen=True)
class FilterConfig:
    lambda_d: float = 0.5
    lambda_f: float = 1.0
    radius: int = 3
    sigma_s: float = 3.0                # pixels
    sigma_c: float = 10.0               # gray levels, 0..255
    sigma_d: float = 0.05               # meters
    iterations: int = 30

    def __post_init__(self):
        if self.lambda_d < 0 or self.lambda_f < 0 or self.radius < 0 or self.iterations < 0:
            raise ValueError("filter weights, radius and iterations must be non-negative")
        if min(self.sigma_s, self.sigma_c, self.sigma_d) <= 0:
            raise ValueError("filter bandwidths must be positive")
        if self.lambda_d + self.lambda_f <= 0 and self.radius < 1:
            raise ValueError("update undefined without data terms or a window")


def render_prior_depth(S, topology, K: CameraIntrinsics, size=None) -> np.ndarray:
    """Z-buffered depth of the posed model; 0 where the mesh does not cover."""
    tri = topology.triangles if hasattr(topology, "triangles") else topology
    return rasterize(S, tri, K, size).depth


def window_offsets(radius: int) -> np.ndarray:
    """(dy, dx) of every window position except the center, row-major."""
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    off = np.stack([dy.ravel(), dx.ravel()], axis=1)
    return off[np.any(off != 0, axis=1)]


def _shift(a, dy, dx, fill=0.0):
    """out[i, j] = a[i + dy, j + dx], ``fill`` outside the image."""
    H, W = a.shape[:2]
    out = np.full_like(a, fill)
    ys, yd = slice(max(dy, 0), H + min(dy, 0)), slice(max(-dy, 0), H + min(-dy, 0))
    xs, xd = slice(max(dx, 0), W + min(dx, 0)), slice(max(-dx, 0), W + min(-dx, 0))
    out[yd, xd] = a[ys, xs]
    return out


def jtf_weight(i, j, color, depth, cfg: FilterConfig = FilterConfig()) -> float:
    """Normalized weight a_ij of pixel j = (row, col) in the window of pixel i."""
    W = FilterWeights.compute(color, depth, cfg)
    di, dj = j[0] - i[0], j[1] - i[1]
    hit = np.nonzero((W.offsets[:, 0] == di) & (W.offsets[:, 1] == dj))[0]
    if len(hit) == 0:
        raise ValueError("j is not in the window of i")
    return float(W.alpha[hit[0], i[0], i[1]])


@dataclass(eq=False)
class FilterWeights:
    offsets: np.ndarray             # (n_off, 2)
    alpha: np.ndarray               # (n_off, H, W) normalized a_ij
    sym: np.ndarray                 # (n_off, H, W) a_ij + a_ji

    @classmethod
    def compute(cls, color, depth, cfg: FilterConfig = FilterConfig()) -> "FilterWeights":
        """Gaussian products of spatial, gray-level and depth distance; the
        depth factor is 1 when either depth is invalid. Neighbors outside
        the image get no weight."""
        gray = to_gray(color)
        depth = np.asarray(depth, dtype=np.float64)
        H, W = gray.shape
        offs = window_offsets(cfg.radius)
        valid = depth > 0
        w = np.zeros((len(offs), H, W))
        inside = np.ones((H, W), dtype=bool)
        for k, (dy, dx) in enumerate(offs):
            gj = _shift(gray, dy, dx)
            zj = _shift(depth, dy, dx)
            vj = _shift(valid, dy, dx, False)
            ins = _shift(inside, dy, dx, False)
            sp = np.exp(-(dy * dy + dx * dx) / (2.0 * cfg.sigma_s ** 2))
            col = np.exp(-((gray - gj) ** 2) / (2.0 * cfg.sigma_c ** 2))
            dep = np.where(valid & vj, np.exp(-((depth - zj) ** 2) / (2.0 * cfg.sigma_d ** 2)), 1.0)
            w[k] = np.where(ins, sp * col * dep, 0.0)
        tot = w.sum(axis=0, keepdims=True)
        alpha = np.divide(w, tot, out=np.zeros_like(w), where=tot > 0)
        sym = alpha.copy()
        index = {(int(dy), int(dx)): k for k, (dy, dx) in enumerate(offs)}
        for k, (dy, dx) in enumerate(offs):
            sym[k] += _shift(alpha[index[(-int(dy), -int(dx))]], dy, dx)
        return cls(offs, alpha, sym)


def _data_weights(Z, V, cfg):
    ld = np.where(np.asarray(Z) > 0, cfg.lambda_d, 0.0)
    lf = np.where(np.asarray(V) > 0, cfg.lambda_f, 0.0)
    return ld, lf


def energy(X, Z, V, weights: FilterWeights, cfg: FilterConfig = FilterConfig()) -> float:
    X, Z, V = (np.asarray(a, dtype=np.float64) for a in (X, Z, V))
    er = 0.0
    for k, (dy, dx) in enumerate(weights.offsets):
        er += float(np.sum(weights.alpha[k] * (X - _shift(X, dy, dx)) ** 2))
    ld, lf = _data_weights(Z, V, cfg)
    return 0.5 * er + 0.5 * float(np.sum(ld * (X - Z) ** 2)) + 0.5 * float(np.sum(lf * (X - V) ** 2))


def filter_step(X, Z, V, weights: FilterWeights, cfg: FilterConfig = FilterConfig(),
                return_flags: bool = False):
    """One Jacobi update; every read comes from X. Pixels whose denominator
    is zero keep their value and are flagged."""
    X, Z, V = (np.asarray(a, dtype=np.float64) for a in (X, Z, V))
    ld, lf = _data_weights(Z, V, cfg)
    num = ld * Z + lf * V
    den = ld + lf + weights.sym.sum(axis=0)
    r = int(np.max(np.abs(weights.offsets))) if len(weights.offsets) else 0
    Xp = np.pad(X, r)
    H, W = X.shape
    for k, (dy, dx) in enumerate(weights.offsets):
        num += weights.sym[k] * Xp[r + dy:r + dy + H, r + dx:r + dx + W]
    stuck = den <= 0
    out = np.where(stuck, X, num / np.where(stuck, 1.0, den))
    return (out, stuck) if return_flags else out


@dataclass
class RecoverResult:
    depth: np.ndarray
    empty: bool
    stuck: np.ndarray
    energies: list


def initial_depth(Z, V) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    return np.where(Z > 0, Z, np.where(V > 0, V, 0.0))


def recover(Z, V, color, cfg: FilterConfig = FilterConfig(), track_energy: bool = False) -> RecoverResult:
    """Run ``cfg.iterations`` Jacobi steps from X0 = Z (holes filled from V)."""
    Z = np.asarray(Z, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    X = initial_depth(Z, V)
    stuck = np.zeros(Z.shape, dtype=bool)
    if not (Z > 0).any() and not (V > 0).any():
        return RecoverResult(np.zeros_like(Z), True, stuck, [])
    weights = FilterWeights.compute(color, Z, cfg)
    energies = [energy(X, Z, V, weights, cfg)] if track_energy else []
    for _ in range(cfg.iterations):
        X, stuck = filter_step(X, Z, V, weights, cfg, return_flags=True)
        if track_energy:
            energies.append(energy(X, Z, V, weights, cfg))
    return RecoverResult(X, False, stuck, energies)

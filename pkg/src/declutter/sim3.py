"""Similarity transforms, closed-form Sim(3) fitting and trimmed scale ICP."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import nearest_neighbor, voxel_downsample

__all__ = [
    "Sim3",
    "IcpConfig",
    "IcpResult",
    "RegistrationError",
    "InsufficientPoints",
    "DegenerateSource",
    "NoInitialOverlap",
    "sim3_least_squares",
    "trimmed_icp",
    "run_trimmed_icp",
    "rotation_angle",
    "robust_frame",
]


class RegistrationError(ValueError):
    pass


class InsufficientPoints(RegistrationError):
    pass


class DegenerateSource(RegistrationError):
    pass


class NoInitialOverlap(RegistrationError):
    def __init__(self, count, needed):
        super().__init__(f"no initial overlap: {count} correspondences, need {needed}")
        self.count = count
        self.needed = needed


@dataclass(frozen=True, eq=False)
class Sim3:
    """``x -> s * R @ x + t``."""

    s: float = 1.0
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        s = float(self.s)
        if not (s > 0 and np.isfinite(s)):
            raise ValueError(f"Sim3 scale must be positive, got {s}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("Sim3 rotation must be a proper orthonormal matrix")
        if not np.all(np.isfinite(t)):
            raise ValueError("Sim3 translation must be finite")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls()

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.s * p @ self.R.T + self.t

    def compose(self, other: "Sim3") -> "Sim3":
        """``self ∘ other``: apply ``other`` first."""
        return Sim3(self.s * other.s, self.R @ other.R, self.s * self.R @ other.t + self.t)

    __matmul__ = compose

    def inverse(self) -> "Sim3":
        return Sim3(1.0 / self.s, self.R.T, -(self.R.T @ self.t) / self.s)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.s * self.R
        m[:3, 3] = self.t
        return m

    @classmethod
    def from_matrix(cls, m) -> "Sim3":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        if not np.allclose(m[3], [0, 0, 0, 1]):
            raise ValueError("last row of a Sim3 matrix must be (0, 0, 0, 1)")
        a = m[:3, :3]
        s = np.cbrt(np.linalg.det(a))
        if not s > 0:
            raise ValueError("matrix block has non-positive determinant")
        # re-orthonormalize to absorb serialization round-off
        u, _, vt = np.linalg.svd(a / s)
        return cls(s, u @ vt, m[:3, 3])

    def to_json(self):
        return [[float(x) for x in row] for row in self.matrix()]

    @classmethod
    def from_json(cls, rows):
        return cls.from_matrix(np.array(rows, dtype=np.float64))


def rotation_angle(R) -> float:
    """Angle in radians of a rotation matrix.

    Uses ``atan2(sin, cos)``; ``arccos`` of the trace alone loses about
    half the digits near zero.
    """
    R = np.asarray(R, dtype=np.float64)
    c = (np.trace(R) - 1.0) / 2.0
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(np.linalg.norm(axis) / 2.0, c))


def sim3_least_squares(x_b, x_a) -> Sim3:
    """Closed-form Sim(3) minimizing ``sum |s R x_b + t - x_a|^2``.

    Centroids, the cross-covariance ``(1/N) Xa^T Xb``, its SVD and a
    reflection fix ``diag(1, 1, sign det(U V^T))`` give a proper rotation;
    the scale is ``trace(S_fix D) / Var(Xb)``.
    """
    xb = np.asarray(x_b, dtype=np.float64).reshape(-1, 3)
    xa = np.asarray(x_a, dtype=np.float64).reshape(-1, 3)
    if len(xb) != len(xa):
        raise ValueError("point sets must have equal counts")
    n = len(xb)
    if n < 3:
        raise InsufficientPoints(f"need at least 3 point pairs, got {n}")
    mu_b, mu_a = xb.mean(axis=0), xa.mean(axis=0)
    cb, ca = xb - mu_b, xa - mu_a
    var_b = np.sum(cb * cb) / n
    if var_b <= 0.0:
        raise DegenerateSource("degenerate source: all points coincide")
    sigma = ca.T @ cb / n
    u, d, vt = np.linalg.svd(sigma)
    fix = np.ones(3)
    fix[2] = 1.0 if np.linalg.det(u @ vt) >= 0 else -1.0
    R = (u * fix) @ vt
    s = float(np.sum(fix * d) / var_b)
    if not s > 0:
        raise RegistrationError("degenerate configuration: non-positive scale")
    t = mu_a - s * R @ mu_b
    return Sim3(s, R, t)


@dataclass(frozen=True)
class IcpConfig:
    """Trimmed ICP parameters.

    ``v`` and ``r`` default to 1% of the target's bounding-box diagonal and
    ``r_factor`` voxels respectively when left as None.
    """

    v: float | None = None
    r: float | None = None
    rho: float = 0.8
    t_max: int = 50
    delta: float = 1e-6
    n_min: int = 8
    r_factor: float = 5.0

    def __post_init__(self):
        if self.v is not None and not self.v > 0:
            raise ValueError("voxel size must be positive")
        if self.r is not None and not self.r > 0:
            raise ValueError("neighbour radius must be positive")
        if not 0 < self.rho <= 1:
            raise ValueError("keep ratio must be in (0, 1]")
        if self.t_max < 1 or not self.delta > 0 or self.n_min < 1:
            raise ValueError("t_max, delta and n_min must be positive")
        if not self.r_factor > 0:
            raise ValueError("r_factor must be positive")

    def resolved(self, target) -> "IcpConfig":
        if self.v is not None and self.r is not None:
            return self
        target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
        diag = float(np.linalg.norm(target.max(axis=0) - target.min(axis=0))) if len(target) else 0.0
        v = self.v if self.v is not None else (0.01 * diag if diag > 0 else 1e-3)
        r = self.r if self.r is not None else self.r_factor * v
        return replace(self, v=v, r=r)


@dataclass
class IcpResult:
    transform: Sim3
    rms_history: list = field(default_factory=list)
    kept_source: np.ndarray | None = None
    source: np.ndarray | None = None
    target: np.ndarray | None = None
    iterations: int = 0
    stop_reason: str = ""


def robust_frame(p, gate=3.0, rounds=3):
    """Centroid and RMS spread of ``p`` after gating gross outliers.

    Points farther from the centre than ``median + gate * 1.4826 * MAD`` of
    the radial distances are ignored; the centre starts at the coordinate
    median and is refined as the mean of the survivors.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    center = np.median(p, axis=0)
    keep = np.ones(len(p), dtype=bool)
    for _ in range(rounds):
        d = np.linalg.norm(p - center, axis=1)
        med = np.median(d)
        mad = np.median(np.abs(d - med))
        keep = d <= med + gate * 1.4826 * mad
        if not keep.any():
            keep = np.ones(len(p), dtype=bool)
        center = p[keep].mean(axis=0)
    d = np.linalg.norm(p[keep] - center, axis=1)
    return center, float(np.sqrt(np.mean(d * d)))


def run_trimmed_icp(p_b, p_a, cfg: IcpConfig | None = None) -> IcpResult:
    """Scale-aware trimmed ICP from ``p_b`` onto ``p_a`` with full trace.

    The start aligns outlier-gated centroids with rotation I and the ratio
    of gated RMS spreads as scale (see :func:`robust_frame`).
    Each iteration matches the transformed source to its exact nearest
    target within ``r``, keeps the ``max(8, floor(rho * |corr|))`` pairs
    with the smallest residuals and refits in closed form.  An iteration is
    accepted only if its trimmed RMS does not exceed the previous one; the
    last accepted transform is returned.
    """
    cfg = (cfg or IcpConfig()).resolved(p_a)
    src = voxel_downsample(p_b, cfg.v)
    dst = voxel_downsample(p_a, cfg.v)
    if len(src) == 0 or len(dst) == 0:
        raise InsufficientPoints("trimmed ICP needs nonempty point sets")

    mu_b, spread_b = robust_frame(src)
    mu_a, spread_a = robust_frame(dst)
    s0 = spread_a / spread_b if spread_a > 0 and spread_b > 0 else 1.0
    current = Sim3(s0, np.eye(3), mu_a - s0 * mu_b)

    result = IcpResult(current, source=src, target=dst)
    rms_prev = None
    for it in range(1, cfg.t_max + 1):
        moved = current.apply(src)
        idx, dist = nearest_neighbor(moved, dst, cfg.r)
        found = np.nonzero(idx >= 0)[0]
        if len(found) < cfg.n_min:
            if it == 1:
                raise NoInitialOverlap(len(found), cfg.n_min)
            result.stop_reason = "too few correspondences"
            break
        keep = min(len(found), max(8, int(np.floor(cfg.rho * len(found)))))
        order = np.argsort(dist[found], kind="stable")[:keep]
        kept = found[order]
        try:
            candidate = sim3_least_squares(src[kept], dst[idx[kept]])
        except RegistrationError:
            result.stop_reason = "degenerate refit"
            break
        resid = candidate.apply(src[kept]) - dst[idx[kept]]
        rms_now = float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))
        if rms_prev is not None and rms_now > rms_prev:
            result.stop_reason = "rms increased"
            break
        current = candidate
        result.transform = current
        result.kept_source = kept
        result.rms_history.append(rms_now)
        result.iterations = it
        if rms_prev is not None and abs(rms_prev - rms_now) < cfg.delta:
            result.stop_reason = "converged"
            break
        rms_prev = rms_now
    else:
        result.stop_reason = "max iterations"
    return result


def trimmed_icp(p_b, p_a, cfg: IcpConfig | None = None) -> Sim3:
    return run_trimmed_icp(p_b, p_a, cfg).transform

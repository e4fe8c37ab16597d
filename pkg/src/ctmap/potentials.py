"""CRF potentials: prediction, measurement, and context, plus the temporal
action distribution and the instance-level relation learning rule.

All potentials are kernels bounded by 1 so particle weights stay scale-stable
under multiplication; normalization is absorbed by the particle filter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Aabb, Pose6D, quat_conjugate, quat_multiply, quat_to_rotvec
from .render import BBox2D

SUPPORT_CONTACT_TOL = 0.01  # m; resting within this gap counts as supported
_INS_VAR_FLOOR = 1e-4  # m^2 per axis


@dataclass(frozen=True)
class PotentialParams:
    """Constants of the three potentials and the temporal action model."""

    sigma_diag: np.ndarray = field(
        default_factory=lambda: np.array([0.02**2] * 3 + [0.05**2] * 3)
    )  # 6-vector: translation variances (m^2) then rotation-vector variances (rad^2)
    r1: float = 0.5
    r2: float = 0.5
    mu_default: float = 5.0  # s, per-class stay-probability decay time
    mu_per_class: dict = field(default_factory=dict)
    t_sig: float = 2.0  # s unseen before the discrete action model kicks in
    delta: float = 0.1  # out-of-view measurement constant
    lam: float = 10.0  # 1/m^2 depth-similarity scale
    w1: float = 0.5
    w2: float = 0.5
    neighbor_radius: float = 1.5  # m
    d_max: float = 1.0  # m^2 penalty when depth overlap is too sparse
    min_valid_fraction: float = 0.05
    context_enabled: bool = True

    def __post_init__(self):
        sig = np.asarray(self.sigma_diag, dtype=float).reshape(6)
        if np.any(sig <= 0):
            raise ValueError("sigma_diag must be positive")
        object.__setattr__(self, "sigma_diag", sig)
        if self.r1 < 0 or self.r2 < 0 or self.r1 + self.r2 > 1 + 1e-9:
            raise ValueError("require r1, r2 >= 0 and r1 + r2 <= 1")
        if not (0 < self.delta < 1):
            raise ValueError("delta must lie in (0, 1)")
        if abs(self.w1 + self.w2 - 1.0) > 1e-9:
            raise ValueError("w1 + w2 must equal 1")
        for name in ("mu_default", "t_sig", "lam", "neighbor_radius", "d_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def mu(self, class_name: str) -> float:
        return float(self.mu_per_class.get(class_name, self.mu_default))


def p_stay(dt: float, mu_class: float, r1: float, r2: float) -> float:
    """Probability that an unobserved object has stayed put after dt seconds."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    return r1 + r2 * math.exp(-dt / mu_class)


def phi_p_continuous(pose_t: Pose6D, pose_prev: Pose6D, sigma_diag: np.ndarray) -> float:
    """Small-motion prediction potential exp(-e^T Sigma^-1 e).

    e stacks the translation difference with the rotation-vector of the
    relative rotation; no 1/2 factor (unnormalized potential).
    """
    dt = pose_t.translation - pose_prev.translation
    q_rel = quat_multiply(quat_conjugate(pose_prev.quaternion), pose_t.quaternion)
    dr = quat_to_rotvec(q_rel)
    e = np.concatenate([dt, dr])
    return math.exp(-float(np.sum(e * e / sigma_diag)))


def _interval_overlap(a0, a1, b0, b1) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def iom(a: BBox2D, b: BBox2D) -> float:
    """Intersection over minimum area of two boxes; 0 if either is empty."""
    min_area = min(a.area, b.area)
    if min_area <= 0:
        return 0.0
    inter = _interval_overlap(a.x_min, a.x_max, b.x_min, b.x_max) * _interval_overlap(
        a.y_min, a.y_max, b.y_min, b.y_max
    )
    return inter / min_area


def iou(a: BBox2D, b: BBox2D) -> float:
    inter = _interval_overlap(a.x_min, a.x_max, b.x_min, b.x_max) * _interval_overlap(
        a.y_min, a.y_max, b.y_min, b.y_max
    )
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


# ---------------------------------------------------------------------------
# measurement potential
# ---------------------------------------------------------------------------

def phi_m(
    hypothesis_mesh,
    hypothesis_class: int,
    pose: Pose6D,
    camera,
    camera_pose: Pose6D,
    observed_depth,
    detections,
    params: PotentialParams,
) -> float:
    """Measurement potential of one hypothesis against one observation.

    Out of view: the constant delta. Otherwise sum_k h * iom * f over
    detections whose boxes overlap the projected hypothesis box; with no
    overlapping detection (e.g. occlusion) the depth similarity f alone.
    """
    from .render import depth_similarity, in_frustum, project_bbox
    from .geometry import posed_aabb

    if not in_frustum(posed_aabb(hypothesis_mesh, pose), camera, camera_pose):
        return params.delta
    box = project_bbox(hypothesis_mesh, pose, camera, camera_pose)
    if box is None:
        return params.delta
    f = depth_similarity(
        hypothesis_mesh,
        pose,
        camera,
        camera_pose,
        observed_depth,
        box,
        params.lam,
        d_max=params.d_max,
        min_valid_fraction=params.min_valid_fraction,
    )
    overlap_sum = 0.0
    any_overlap = False
    for det in detections:
        l = iom(det.bbox, box)
        if l > 0.0:
            any_overlap = True
            overlap_sum += float(det.scores[hypothesis_class]) * l
    if not any_overlap:
        return f
    return overlap_sum * f


# ---------------------------------------------------------------------------
# context potential
# ---------------------------------------------------------------------------

@dataclass
class PairRelation:
    preferred_distance: float
    strength: float


@dataclass
class CategoryContextModel:
    """Hand-encoded class-pair priors: co-occurrence distances plus physical
    plausibility penalties (no interpenetration, no floating objects)."""

    penetration_weight: float = 100.0
    floating_weight: float = 10.0
    pairs: dict = field(default_factory=dict)  # (class_a, class_b) -> PairRelation

    def relation(self, class_a: str, class_b: str) -> PairRelation | None:
        rel = self.pairs.get((class_a, class_b))
        if rel is None:
            rel = self.pairs.get((class_b, class_a))
        return rel

    def add_pair(self, class_a: str, class_b: str, preferred_distance: float, strength: float):
        self.pairs[(class_a, class_b)] = PairRelation(preferred_distance, strength)

    def to_json_dict(self) -> dict:
        return {
            "penetration_weight": self.penetration_weight,
            "floating_weight": self.floating_weight,
            "pairs": [
                {"a": a, "b": b, "preferred_distance": rel.preferred_distance, "strength": rel.strength}
                for (a, b), rel in sorted(self.pairs.items())
            ],
        }

    @staticmethod
    def from_json_dict(data: dict) -> "CategoryContextModel":
        model = CategoryContextModel(
            penetration_weight=float(data.get("penetration_weight", 100.0)),
            floating_weight=float(data.get("floating_weight", 10.0)),
        )
        for row in data.get("pairs", []):
            model.add_pair(row["a"], row["b"], float(row["preferred_distance"]), float(row["strength"]))
        return model


def clearance_below(box_i: Aabb, support_boxes: list[Aabb]) -> float:
    """Gap from box_i's bottom down to the nearest support surface (other
    objects' tops where footprints overlap, else the floor z=0); 0 when
    resting within SUPPORT_CONTACT_TOL or penetrating a support."""
    bottom = float(box_i.min[2])
    candidates = [0.0]
    for sb in support_boxes:
        if box_i.xy_overlaps(sb):
            candidates.append(float(sb.max[2]))
    gaps = [bottom - c for c in candidates if bottom - c >= -SUPPORT_CONTACT_TOL]
    if not gaps:
        return 0.0
    gap = min(gaps)
    return 0.0 if gap <= SUPPORT_CONTACT_TOL else gap


def phi_cat(
    class_i: str,
    box_i: Aabb,
    class_j: str,
    box_j: Aabb,
    model: CategoryContextModel,
) -> float:
    """Category-level pair potential: physical plausibility penalties plus an
    optional preferred co-occurrence distance for the class pair."""
    pen = box_i.overlap_depth(box_j)
    clear = clearance_below(box_i, [box_j])
    exponent = model.penetration_weight * pen * pen + model.floating_weight * clear * clear
    rel = model.relation(class_i, class_j)
    if rel is not None and rel.strength > 0:
        dist = float(np.linalg.norm(box_i.center - box_j.center))
        exponent += rel.strength * (dist - rel.preferred_distance) ** 2
    return math.exp(-exponent)


@dataclass
class _PairStats:
    mean: np.ndarray
    m2: np.ndarray
    count: int

    def variance(self) -> np.ndarray:
        if self.count < 1:
            return np.full(3, _INS_VAR_FLOOR)
        return np.maximum(self.m2 / self.count, _INS_VAR_FLOOR)


@dataclass
class InstanceContextModel:
    """Learned per-instance-pair displacement statistics (running Gaussian)."""

    stats: dict = field(default_factory=dict)  # (id_i, id_j) -> _PairStats

    def has_pair(self, id_i: str, id_j: str) -> bool:
        return (id_i, id_j) in self.stats

    def update(self, id_i: str, id_j: str, displacement: np.ndarray) -> None:
        """Fold one observed displacement (t_i - t_j) into the running mean
        and covariance for the ordered pair."""
        d = np.asarray(displacement, dtype=float).reshape(3)
        st = self.stats.get((id_i, id_j))
        if st is None:
            self.stats[(id_i, id_j)] = _PairStats(mean=d.copy(), m2=np.zeros(3), count=1)
            return
        st.count += 1
        delta = d - st.mean
        st.mean = st.mean + delta / st.count
        st.m2 = st.m2 + delta * (d - st.mean)

    def evaluate(self, id_i: str, id_j: str, displacement: np.ndarray) -> float | None:
        """Gaussian kernel on the displacement, or None when the pair is
        unknown (the caller folds the instance weight into the category term)."""
        st = self.stats.get((id_i, id_j))
        if st is None:
            return None
        d = np.asarray(displacement, dtype=float).reshape(3) - st.mean
        var = st.variance()
        return math.exp(-0.5 * float(np.sum(d * d / var)))

    def to_json_dict(self) -> dict:
        return {
            "pairs": [
                {
                    "i": i,
                    "j": j,
                    "mean": st.mean.tolist(),
                    "m2": st.m2.tolist(),
                    "count": st.count,
                }
                for (i, j), st in sorted(self.stats.items())
            ]
        }

    @staticmethod
    def from_json_dict(data: dict) -> "InstanceContextModel":
        model = InstanceContextModel()
        for row in data.get("pairs", []):
            model.stats[(row["i"], row["j"])] = _PairStats(
                mean=np.asarray(row["mean"], dtype=float),
                m2=np.asarray(row["m2"], dtype=float),
                count=int(row["count"]),
            )
        return model

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_dict(), f, indent=1, sort_keys=True)

    @staticmethod
    def load(path) -> "InstanceContextModel":
        with open(path, "r", encoding="utf-8") as f:
            return InstanceContextModel.from_json_dict(json.load(f))


def phi_c(
    class_i: str,
    box_i: Aabb,
    trans_i: np.ndarray,
    id_i: str,
    class_j: str,
    box_j: Aabb,
    trans_j: np.ndarray,
    id_j: str,
    params: PotentialParams,
    category_model: CategoryContextModel,
    instance_model: InstanceContextModel,
) -> float:
    """Mixture w1 * phi_cat + w2 * phi_ins; for pairs the instance model has
    never seen, phi_ins is neutral and its weight folds into the category term."""
    cat = phi_cat(class_i, box_i, class_j, box_j, category_model)
    ins = instance_model.evaluate(id_i, id_j, np.asarray(trans_i) - np.asarray(trans_j))
    if ins is None:
        return (params.w1 + params.w2) * cat
    return params.w1 * cat + params.w2 * ins


def tmap_params(params: PotentialParams) -> PotentialParams:
    """Ablation switch: same parameters with the context product disabled."""
    return replace(params, context_enabled=False)


# scenario-JSON (de)serialization -------------------------------------------

def params_to_json_dict(params: PotentialParams) -> dict:
    return {
        "sigma_diag": params.sigma_diag.tolist(),
        "r1": params.r1,
        "r2": params.r2,
        "mu_default": params.mu_default,
        "mu_per_class": dict(sorted(params.mu_per_class.items())),
        "t_sig": params.t_sig,
        "delta": params.delta,
        "lambda": params.lam,
        "w1": params.w1,
        "w2": params.w2,
        "neighbor_radius": params.neighbor_radius,
        "d_max": params.d_max,
        "min_valid_fraction": params.min_valid_fraction,
    }


def params_from_json_dict(data: dict) -> PotentialParams:
    kwargs = {}
    if "sigma_diag" in data:
        kwargs["sigma_diag"] = np.asarray(data["sigma_diag"], dtype=float)
    for src, dst in [
        ("r1", "r1"),
        ("r2", "r2"),
        ("mu_default", "mu_default"),
        ("t_sig", "t_sig"),
        ("delta", "delta"),
        ("lambda", "lam"),
        ("w1", "w1"),
        ("w2", "w2"),
        ("neighbor_radius", "neighbor_radius"),
        ("d_max", "d_max"),
        ("min_valid_fraction", "min_valid_fraction"),
    ]:
        if src in data:
            kwargs[dst] = float(data[src])
    if "mu_per_class" in data:
        kwargs["mu_per_class"] = {k: float(v) for k, v in data["mu_per_class"].items()}
    return PotentialParams(**kwargs)

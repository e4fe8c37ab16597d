"""Track management, particle initialization, and the per-frame filter step.

Each tracked object holds M weighted particles over (class, 6-DOF pose).
A frame runs: associate detections -> advance pending tracks -> for each
active track resample, predict, weight -> bookkeeping and instance-relation
updates. Context is always evaluated against the previous frame's map
estimates, so per-track updates are order-independent within a frame.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Aabb,
    CameraModel,
    Pose6D,
    back_project,
    posed_aabb,
    quat_from_rotvec,
    quat_multiply,
    random_quaternion,
    sample_support_placement,
    support_region,
)
from .potentials import (
    CategoryContextModel,
    InstanceContextModel,
    PotentialParams,
    iou,
    p_stay,
    phi_c,
    phi_m,
)
from .render import BBox2D, DepthImage, in_frustum, project_bbox
from .simworld import Detection, Observation

log = logging.getLogger(__name__)

_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class ObjectHypothesis:
    """One joint sample of object class and pose."""

    class_index: int
    pose: Pose6D


@dataclass
class ParticleSet:
    """M weighted (class, pose) particles stored as parallel arrays."""

    classes: np.ndarray  # (M,) int64
    translations: np.ndarray  # (M, 3)
    quaternions: np.ndarray  # (M, 4) unit, (w, x, y, z)
    weights: np.ndarray  # (M,) nonnegative, normalized

    def __post_init__(self):
        m = len(self.classes)
        assert self.translations.shape == (m, 3)
        assert self.quaternions.shape == (m, 4)
        assert self.weights.shape == (m,)

    @property
    def m(self) -> int:
        return len(self.classes)

    def pose(self, k: int) -> Pose6D:
        return Pose6D(self.translations[k].copy(), self.quaternions[k].copy())

    def hypothesis(self, k: int) -> ObjectHypothesis:
        return ObjectHypothesis(int(self.classes[k]), self.pose(k))

    def normalize(self) -> None:
        total = float(self.weights.sum())
        if total <= 0:
            raise ValueError("cannot normalize zero weights")
        self.weights = self.weights / total

    def translation_std(self) -> float:
        """Weighted particle-position spread: sqrt of summed per-axis variance."""
        mean = self.weights @ self.translations
        d = self.translations - mean
        var = self.weights @ (d * d)
        return float(np.sqrt(var.sum()))


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Low-variance resampling: survivor indices for M equally spaced positions."""
    m = len(weights)
    positions = (rng.random() + np.arange(m)) / m
    cumsum = np.cumsum(weights / weights.sum())
    cumsum[-1] = 1.0
    return np.searchsorted(cumsum, positions, side="right")


def resample(particles: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    idx = systematic_resample(particles.weights, rng)
    m = particles.m
    return ParticleSet(
        classes=particles.classes[idx].copy(),
        translations=particles.translations[idx].copy(),
        quaternions=particles.quaternions[idx].copy(),
        weights=np.full(m, 1.0 / m),
    )


@dataclass
class MapEstimate:
    class_index: int
    pose: Pose6D
    confidence: float


def map_estimate(particles: ParticleSet, n_classes: int) -> MapEstimate:
    """Weight-summed majority class; pose of that class's highest-weight particle."""
    mass = np.bincount(particles.classes, weights=particles.weights, minlength=n_classes)
    cls = int(np.argmax(mass))
    members = np.flatnonzero(particles.classes == cls)
    best = members[int(np.argmax(particles.weights[members]))]
    return MapEstimate(cls, particles.pose(int(best)), float(mass[cls]))


@dataclass
class Track:
    track_id: str
    order: int
    state: str  # "pending" | "active"
    consec: int = 0
    last_bbox: BBox2D | None = None
    pending_detection: Detection | None = None
    particles: ParticleSet | None = None
    last_seen: float = 0.0
    activated_frame: int = -1
    degenerate_events: int = 0


@dataclass
class Belief:
    tracks: dict = field(default_factory=dict)  # track_id -> Track
    frame: int = -1
    time: float = 0.0
    next_track_number: int = 0

    def active_tracks(self) -> list:
        return [t for t in sorted(self.tracks.values(), key=lambda t: t.order) if t.state == "active"]

    def new_track_id(self) -> str:
        tid = f"t{self.next_track_number:03d}"
        self.next_track_number += 1
        return tid


@dataclass(frozen=True)
class FilterConfig:
    m_particles: int = 200
    k_assoc: int = 3  # consecutive associations before a track initiates
    iou_threshold: float = 0.5
    init_jitter_sigma: float = 0.02  # m
    center_region_scale: float = 0.5  # central 25% of the bbox area
    convergence_trans_std: float = 0.02  # m; gate for instance-relation updates


def associate(
    detections: list, track_boxes: dict, track_order: dict, iou_threshold: float = 0.5
):
    """Greedy best-IoU matching of detections to predicted track boxes.

    Returns (matches: {detection index -> track id}, unmatched detection
    indices). Each detection matches at most one track and vice versa; ties
    break toward the larger IoU, then the earlier-created track.
    """
    pairs = []
    for di, det in enumerate(detections):
        for tid, box in track_boxes.items():
            if box is None:
                continue
            v = iou(det.bbox, box)
            if v >= iou_threshold:
                pairs.append((-v, track_order[tid], di, tid))
    pairs.sort()
    matches: dict[int, str] = {}
    used_tracks: set[str] = set()
    for _, _, di, tid in pairs:
        if di in matches or tid in used_tracks:
            continue
        matches[di] = tid
        used_tracks.add(tid)
    unmatched = [di for di in range(len(detections)) if di not in matches]
    return matches, unmatched


def init_particles(
    detection: Detection,
    depth: DepthImage,
    camera: CameraModel,
    robot_pose: Pose6D,
    m: int,
    rng: np.random.Generator,
    jitter_sigma: float = 0.02,
    center_region_scale: float = 0.5,
) -> ParticleSet | None:
    """Particles for a new track: class from the detection scores, centers
    back-projected from depth in the bbox's central region, orientation
    uniform over SO(3). Returns None when the center region has no valid
    depth (initialization deferred)."""
    box = detection.bbox
    cx, cy = box.center()
    hw = 0.5 * (box.x_max - box.x_min) * center_region_scale
    hh = 0.5 * (box.y_max - box.y_min) * center_region_scale
    inner = BBox2D.clipped(cx - hw, cy - hh, cx + hw, cy + hh, depth.width, depth.height)
    if inner is None:
        return None
    x0, y0, x1, y1 = inner.pixel_window()
    window = depth.depth[y0:y1, x0:x1]
    ys, xs = np.nonzero(window > 0.0)
    if len(xs) == 0:
        return None
    n_classes = len(detection.scores)
    classes = rng.choice(n_classes, size=m, p=detection.scores)
    picks = rng.integers(0, len(xs), size=m)
    jitter = rng.normal(0.0, jitter_sigma, size=(m, 3))
    translations = np.empty((m, 3))
    quaternions = np.empty((m, 4))
    for k in range(m):
        u = x0 + xs[picks[k]] + 0.5
        v = y0 + ys[picks[k]] + 0.5
        d = window[ys[picks[k]], xs[picks[k]]]
        p_cam = back_project(camera, u, v, d)
        translations[k] = robot_pose.apply(p_cam) + jitter[k]
        quaternions[k] = random_quaternion(rng)
    return ParticleSet(
        classes=classes.astype(np.int64),
        translations=translations,
        quaternions=quaternions,
        weights=np.full(m, 1.0 / m),
    )


def _drift(particles: ParticleSet, mask: np.ndarray, sigma_diag: np.ndarray, rng) -> None:
    """In-place Gaussian pose diffusion on the masked particles."""
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return
    sd = np.sqrt(sigma_diag)
    particles.translations[idx] += rng.normal(0.0, 1.0, (len(idx), 3)) * sd[:3]
    rotvecs = rng.normal(0.0, 1.0, (len(idx), 3)) * sd[3:]
    for j, k in enumerate(idx):
        dq = quat_from_rotvec(rotvecs[j])
        particles.quaternions[k] = quat_multiply(particles.quaternions[k], dq)
        particles.quaternions[k] /= np.linalg.norm(particles.quaternions[k])


def predict(
    particles: ParticleSet,
    dt_unseen: float,
    params: PotentialParams,
    class_meshes: list,
    class_names: list,
    camera: CameraModel,
    robot_pose: Pose6D,
    support_candidates: list,
    rng: np.random.Generator,
) -> None:
    """Propagate particles in place.

    Particles in the camera frustum, or any particle while the track was seen
    less than t_sig ago, diffuse by Gaussian drift. Otherwise the discrete
    action is drawn: stay (drift) or move to a uniformly chosen support region
    of another active object. With no other active object, move falls back to
    stay."""
    m = particles.m
    if dt_unseen < params.t_sig:
        _drift(particles, np.ones(m, dtype=bool), params.sigma_diag, rng)
        return
    drift_mask = np.zeros(m, dtype=bool)
    for k in range(m):
        mesh = class_meshes[particles.classes[k]]
        box = posed_aabb(mesh, particles.pose(k))
        if in_frustum(box, camera, robot_pose):
            drift_mask[k] = True
            continue
        mu = params.mu(class_names[particles.classes[k]])
        stay = rng.random() < p_stay(dt_unseen, mu, params.r1, params.r2)
        if stay or not support_candidates:
            drift_mask[k] = True
            continue
        j = int(rng.integers(0, len(support_candidates)))
        region = support_candidates[j]
        mesh_k = class_meshes[particles.classes[k]]
        pose = sample_support_placement(region, mesh_k, rng)
        particles.translations[k] = pose.translation
        particles.quaternions[k] = pose.quaternion
    _drift(particles, drift_mask, params.sigma_diag, rng)


@dataclass(frozen=True)
class NeighborEstimate:
    track_id: str
    class_name: str
    translation: np.ndarray
    aabb: Aabb


def weight(
    particles: ParticleSet,
    observation: Observation,
    camera: CameraModel,
    class_meshes: list,
    class_names: list,
    neighbors: list,
    params: PotentialParams,
    category_model: CategoryContextModel,
    instance_model: InstanceContextModel,
    track_id: str,
) -> bool:
    """Reweight particles by phi_m times the context product over neighbors.

    Weights are accumulated in log space and normalized in place. Returns True
    when all raw weights underflowed and the set was reset to uniform."""
    m = particles.m
    logw = np.empty(m)
    use_context = params.context_enabled and neighbors
    for k in range(m):
        cls = int(particles.classes[k])
        pose = particles.pose(k)
        mesh = class_meshes[cls]
        pm = phi_m(
            mesh, cls, pose, camera, observation.robot_pose,
            observation.depth, observation.detections, params,
        )
        lw = math.log(max(pm, _LOG_FLOOR))
        if use_context:
            box_i = posed_aabb(mesh, pose)
            for nb in neighbors:
                pc = phi_c(
                    class_names[cls], box_i, particles.translations[k], track_id,
                    nb.class_name, nb.aabb, nb.translation, nb.track_id,
                    params, category_model, instance_model,
                )
                lw += math.log(max(pc, _LOG_FLOOR))
        logw[k] = lw
    peak = float(np.max(logw))
    if not np.isfinite(peak) or peak <= math.log(_LOG_FLOOR) + 1:
        particles.weights = np.full(m, 1.0 / m)
        return True
    w = np.exp(logw - peak)
    total = float(w.sum())
    if total <= 0 or not np.isfinite(total):
        particles.weights = np.full(m, 1.0 / m)
        return True
    particles.weights = w / total
    return False


class CTMapFilter:
    """Per-frame coordinator: owns the belief, parameters, and learned
    instance relations."""

    def __init__(
        self,
        class_names: list,
        class_meshes: list,
        camera: CameraModel,
        params: PotentialParams,
        category_model: CategoryContextModel | None = None,
        instance_model: InstanceContextModel | None = None,
        config: FilterConfig = FilterConfig(),
        seed: int = 0,
    ):
        self.class_names = list(class_names)
        self.class_meshes = list(class_meshes)
        self.camera = camera
        self.params = params
        self.category_model = category_model or CategoryContextModel()
        self.instance_model = instance_model or InstanceContextModel()
        self.config = config
        self.rng = np.random.default_rng([seed, 0x5EED])
        self.belief = Belief()

    # -- snapshots ---------------------------------------------------------

    def estimates(self) -> dict:
        return {
            t.track_id: map_estimate(t.particles, len(self.class_names))
            for t in self.belief.active_tracks()
        }

    def _snapshot(self) -> dict:
        """Previous-step map estimates with derived geometry, frozen for the
        whole frame."""
        snap = {}
        for t in self.belief.active_tracks():
            est = map_estimate(t.particles, len(self.class_names))
            mesh = self.class_meshes[est.class_index]
            snap[t.track_id] = (est, posed_aabb(mesh, est.pose))
        return snap

    # -- one frame ---------------------------------------------------------

    def step(self, observation: Observation) -> None:
        belief = self.belief
        belief.frame = observation.frame
        belief.time = observation.time
        t_now = observation.time
        snapshot = self._snapshot()

        track_boxes: dict[str, BBox2D | None] = {}
        track_order: dict[str, int] = {}
        for tr in sorted(belief.tracks.values(), key=lambda t: t.order):
            track_order[tr.track_id] = tr.order
            if tr.state == "active":
                est, _ = snapshot[tr.track_id]
                mesh = self.class_meshes[est.class_index]
                box = project_bbox(mesh, est.pose, self.camera, observation.robot_pose)
                track_boxes[tr.track_id] = box if box is not None else tr.last_bbox
            else:
                track_boxes[tr.track_id] = tr.last_bbox

        matches, unmatched = associate(
            observation.detections, track_boxes, track_order, self.config.iou_threshold
        )
        matched_tracks = {tid: observation.detections[di] for di, tid in matches.items()}

        # pending-track lifecycle
        for tr in list(belief.tracks.values()):
            if tr.state != "pending":
                continue
            det = matched_tracks.get(tr.track_id)
            if det is None:
                del belief.tracks[tr.track_id]
                continue
            tr.consec += 1
            tr.last_bbox = det.bbox
            tr.pending_detection = det
            if tr.consec >= self.config.k_assoc:
                particles = init_particles(
                    det, observation.depth, self.camera, observation.robot_pose,
                    self.config.m_particles, self.rng,
                    jitter_sigma=self.config.init_jitter_sigma,
                    center_region_scale=self.config.center_region_scale,
                )
                if particles is not None:
                    tr.state = "active"
                    tr.particles = particles
                    tr.last_seen = t_now
                    tr.activated_frame = observation.frame
                # else: no valid depth yet; retry on the next association

        for di in unmatched:
            det = observation.detections[di]
            tid = belief.new_track_id()
            belief.tracks[tid] = Track(
                track_id=tid,
                order=belief.next_track_number - 1,
                state="pending",
                consec=1,
                last_bbox=det.bbox,
                pending_detection=det,
            )

        # active tracks: resample -> predict -> weight
        for tr in belief.active_tracks():
            if tr.activated_frame == observation.frame:
                continue  # initialized from this frame's observation
            tr.particles = resample(tr.particles, self.rng)
            dt_unseen = max(0.0, t_now - tr.last_seen)
            supports = [
                support_region(self.class_meshes[est.class_index], est.pose)
                for tid, (est, _) in sorted(snapshot.items())
                if tid != tr.track_id
            ]
            predict(
                tr.particles, dt_unseen, self.params, self.class_meshes, self.class_names,
                self.camera, observation.robot_pose, supports, self.rng,
            )
            neighbors = self._neighbors(tr.track_id, snapshot)
            degenerate = weight(
                tr.particles, observation, self.camera, self.class_meshes, self.class_names,
                neighbors, self.params, self.category_model, self.instance_model, tr.track_id,
            )
            if degenerate:
                tr.degenerate_events += 1
                log.info("track %s: weight degeneracy at frame %d", tr.track_id, observation.frame)

        for tid, det in matched_tracks.items():
            tr = belief.tracks.get(tid)
            if tr is not None and tr.state == "active":
                tr.last_seen = t_now
                tr.last_bbox = det.bbox

        if self.params.context_enabled:
            self._update_instance_relations()

    def _neighbors(self, track_id: str, snapshot: dict) -> list:
        own = snapshot.get(track_id)
        if own is None:
            return []
        center = own[0].pose.translation
        out = []
        for tid, (est, box) in sorted(snapshot.items()):
            if tid == track_id:
                continue
            if np.linalg.norm(est.pose.translation - center) <= self.params.neighbor_radius:
                out.append(
                    NeighborEstimate(
                        track_id=tid,
                        class_name=self.class_names[est.class_index],
                        translation=est.pose.translation,
                        aabb=box,
                    )
                )
        return out

    def _update_instance_relations(self) -> None:
        converged = []
        for tr in self.belief.active_tracks():
            if tr.particles.translation_std() < self.config.convergence_trans_std:
                est = map_estimate(tr.particles, len(self.class_names))
                converged.append((tr.track_id, est.pose.translation))
        for i, (tid_i, t_i) in enumerate(converged):
            for tid_j, t_j in converged:
                if tid_i != tid_j:
                    self.instance_model.update(tid_i, tid_j, t_i - t_j)


# ---------------------------------------------------------------------------
# belief snapshot files
# ---------------------------------------------------------------------------

def snapshot_dict(filter_: CTMapFilter) -> dict:
    objects = []
    for tid, est in sorted(filter_.estimates().items()):
        tr = filter_.belief.tracks[tid]
        objects.append(
            {
                "id": tid,
                "class": filter_.class_names[est.class_index],
                "t": [float(x) for x in est.pose.translation],
                "q": [float(x) for x in est.pose.quaternion],
                "confidence": est.confidence,
                "last_seen": tr.last_seen,
            }
        )
    return {"frame": filter_.belief.frame, "time": filter_.belief.time, "objects": objects}


def write_snapshot_line(f, filter_: CTMapFilter) -> None:
    f.write(json.dumps(snapshot_dict(filter_), sort_keys=True) + "\n")


def read_snapshots(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out

"""Scripted ground-truth world, robot trajectory, and synthetic noisy detector.

A Scenario is a JSON document (see README for the schema) plus the OBJ meshes
it references. Frame generation is deterministic: frame k draws from
default_rng([seed, k]), so identical scenario + seed give a bit-identical
observation stream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraModel, Pose6D, TriMesh, load_obj, quat_slerp
from .potentials import (
    CategoryContextModel,
    PotentialParams,
    params_from_json_dict,
    params_to_json_dict,
)
from .render import BBox2D, DepthImage, render_depth, project_bbox, visibility


class ScenarioError(ValueError):
    """Scenario file violates the schema."""


class MissingMeshError(ScenarioError):
    """A referenced OBJ file does not exist."""

    def __init__(self, path):
        super().__init__(f"mesh file not found: {path}")
        self.path = str(path)


class DetectionLogError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class DetectorModel:
    confusion: np.ndarray  # (|C|, |C|) row-stochastic: P(argmax label | true class)
    score_temperature: float = 0.1
    p_detect_visible: float = 0.95
    v_min: float = 0.3
    bbox_jitter_sigma: float = 0.0
    false_positive_rate: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.confusion, dtype=float)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ScenarioError("confusion matrix must be square")
        if np.any(c < 0) or np.any(np.abs(c.sum(axis=1) - 1.0) > 1e-9):
            raise ScenarioError("confusion rows must be nonnegative and sum to 1")
        object.__setattr__(self, "confusion", c)
        for name in ("p_detect_visible", "v_min"):
            v = getattr(self, name)
            if not (0 <= v <= 1):
                raise ScenarioError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class Detection:
    bbox: BBox2D
    scores: np.ndarray  # simplex over classes

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        if abs(float(s.sum()) - 1.0) > 1e-6 or np.any(s < -1e-12):
            raise ValueError("scores must form a simplex")
        object.__setattr__(self, "scores", s)

    @property
    def label(self) -> int:
        return int(np.argmax(self.scores))

    @property
    def confidence(self) -> float:
        return float(np.max(self.scores))


@dataclass(frozen=True)
class Observation:
    time: float
    frame: int
    robot_pose: Pose6D
    depth: DepthImage
    detections: list


@dataclass(frozen=True)
class ObjectInstance:
    object_id: str
    class_name: str
    mesh: TriMesh
    initial_pose: Pose6D


@dataclass(frozen=True)
class MoveEvent:
    time: float
    object_id: str
    new_pose: Pose6D


@dataclass
class Scenario:
    classes: list
    class_meshes: dict  # class name -> TriMesh
    objects: list  # ObjectInstance
    trajectory: list  # (time, Pose6D) waypoints, sorted by time
    move_events: list  # MoveEvent, sorted by time
    camera: CameraModel
    detector: DetectorModel
    depth_noise_sigma: float
    seed: int
    duration: float
    frame_rate: float
    potentials: PotentialParams = field(default_factory=PotentialParams)
    category_context: CategoryContextModel = field(default_factory=CategoryContextModel)
    symmetry_axes: dict = field(default_factory=dict)  # class name -> unit 3-vector
    raw: dict = field(default_factory=dict)  # source JSON document, for round-trips

    def __post_init__(self):
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ScenarioError("object ids must be unique")
        for o in self.objects:
            if o.class_name not in self.classes:
                raise ScenarioError(f"object {o.object_id} has unknown class {o.class_name}")
        for ev in self.move_events:
            if not (0.0 <= ev.time <= self.duration):
                raise ScenarioError(f"move event at t={ev.time} outside [0, {self.duration}]")
            if ev.object_id not in ids:
                raise ScenarioError(f"move event references unknown object {ev.object_id}")
        if self.detector.confusion.shape[0] != len(self.classes):
            raise ScenarioError("confusion matrix size does not match class count")
        if not self.trajectory:
            raise ScenarioError("trajectory needs at least one waypoint")
        self.trajectory = sorted(self.trajectory, key=lambda w: w[0])
        self.move_events = sorted(self.move_events, key=lambda e: (e.time, e.object_id))

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.duration * self.frame_rate + 1e-9)) + 1

    def frame_time(self, frame: int) -> float:
        return frame / self.frame_rate

    def class_index(self, name: str) -> int:
        return self.classes.index(name)

    def mesh_for_class(self, class_index: int) -> TriMesh:
        return self.class_meshes[self.classes[class_index]]


def _pose_from_json(data: dict) -> Pose6D:
    return Pose6D(np.asarray(data["t"], dtype=float), np.asarray(data["q"], dtype=float))


def pose_to_json(pose: Pose6D) -> dict:
    return {"t": [float(x) for x in pose.translation], "q": [float(x) for x in pose.quaternion]}


def load_scenario(path) -> Scenario:
    """Load a scenario JSON file; mesh paths resolve relative to the file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ScenarioError(f"invalid JSON in {path}: {e}") from None
    base = path.parent
    try:
        classes = list(doc["classes"])
        mesh_paths = dict(doc["class_meshes"])
        meshes = {}
        for cls in classes:
            if cls not in mesh_paths:
                raise ScenarioError(f"class {cls!r} has no mesh entry")
            mpath = base / mesh_paths[cls]
            if not mpath.exists():
                raise MissingMeshError(mpath)
            meshes[cls] = load_obj(mpath)
        objects = []
        for entry in doc["objects"]:
            cls = entry["class"]
            if "mesh" in entry:
                mpath = base / entry["mesh"]
                if not mpath.exists():
                    raise MissingMeshError(mpath)
                mesh = load_obj(mpath)
            else:
                mesh = meshes.get(cls)
                if mesh is None:
                    raise ScenarioError(f"object {entry['id']} has unknown class {cls}")
            objects.append(ObjectInstance(entry["id"], cls, mesh, _pose_from_json(entry["pose"])))
        trajectory = [(float(w["time"]), _pose_from_json(w["pose"])) for w in doc["trajectory"]]
        moves = [
            MoveEvent(float(e["time"]), e["object"], _pose_from_json(e["pose"]))
            for e in doc.get("move_events", [])
        ]
        cam = doc["camera"]
        camera = CameraModel(
            fx=float(cam["fx"]),
            fy=float(cam["fy"]),
            cx=float(cam["cx"]),
            cy=float(cam["cy"]),
            width=int(cam["width"]),
            height=int(cam["height"]),
            near=float(cam["near"]),
            far=float(cam["far"]),
        )
        det = doc["detector"]
        detector = DetectorModel(
            confusion=np.asarray(det["confusion"], dtype=float),
            score_temperature=float(det.get("score_temperature", 0.1)),
            p_detect_visible=float(det.get("p_detect_visible", 0.95)),
            v_min=float(det.get("v_min", 0.3)),
            bbox_jitter_sigma=float(det.get("bbox_jitter_sigma", 0.0)),
            false_positive_rate=float(det.get("false_positive_rate", 0.0)),
        )
        pot = doc.get("potentials", {})
        params = params_from_json_dict(pot)
        category = CategoryContextModel.from_json_dict(pot.get("category_context", {}))
        symmetry = {
            k: np.asarray(v, dtype=float) for k, v in doc.get("symmetry_axes", {}).items()
        }
        return Scenario(
            classes=classes,
            class_meshes=meshes,
            objects=objects,
            trajectory=trajectory,
            move_events=moves,
            camera=camera,
            detector=detector,
            depth_noise_sigma=float(doc.get("depth_noise_sigma", 0.0)),
            seed=int(doc["seed"]),
            duration=float(doc["duration"]),
            frame_rate=float(doc["frame_rate"]),
            potentials=params,
            category_context=category,
            symmetry_axes=symmetry,
            raw=doc,
        )
    except MissingMeshError:
        raise
    except (KeyError, TypeError, IndexError) as e:
        raise ScenarioError(f"scenario schema violation in {path}: {e!r}") from None


def save_scenario_doc(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# ground-truth state
# ---------------------------------------------------------------------------

def interpolate_trajectory(trajectory: list, t: float) -> Pose6D:
    """Linear position / slerp rotation between timed waypoints; clamped ends."""
    times = [w[0] for w in trajectory]
    if t <= times[0]:
        return trajectory[0][1]
    if t >= times[-1]:
        return trajectory[-1][1]
    hi = next(i for i, wt in enumerate(times) if wt >= t)
    lo = hi - 1
    t0, p0 = trajectory[lo]
    t1, p1 = trajectory[hi]
    if t1 - t0 < 1e-12:
        return p1
    a = (t - t0) / (t1 - t0)
    trans = (1 - a) * p0.translation + a * p1.translation
    quat = quat_slerp(p0.quaternion, p1.quaternion, a)
    return Pose6D(trans, quat)


def world_at(scenario: Scenario, t: float):
    """(robot pose, {object id: ground-truth pose}) at time t."""
    if not (0.0 <= t <= scenario.duration + 1e-9):
        raise ValueError(f"t={t} outside scenario duration")
    robot = interpolate_trajectory(scenario.trajectory, t)
    poses = {o.object_id: o.initial_pose for o in scenario.objects}
    for ev in scenario.move_events:  # sorted; the latest event at or before t wins
        if ev.time <= t + 1e-9:
            poses[ev.object_id] = ev.new_pose
    return robot, poses


@dataclass(frozen=True)
class FrameTruth:
    """Per-frame ground truth used by evaluation and the ICP baseline."""

    time: float
    frame: int
    robot_pose: Pose6D
    object_poses: dict  # id -> Pose6D
    visible_fraction: dict  # id -> float
    gt_bboxes: dict  # id -> BBox2D (objects with any projection; None filtered out)
    clean_depth: DepthImage


def frame_truth(scenario: Scenario, frame: int) -> FrameTruth:
    t = scenario.frame_time(frame)
    robot, poses = world_at(scenario, t)
    items = [(o.mesh, poses[o.object_id]) for o in scenario.objects]
    clean = render_depth(items, scenario.camera, robot)
    vis = {}
    boxes = {}
    for o in scenario.objects:
        pose = poses[o.object_id]
        _, vf = visibility(
            o.mesh, pose, items, scenario.camera, robot, scene_depth=clean
        )
        vis[o.object_id] = vf
        box = project_bbox(o.mesh, pose, scenario.camera, robot)
        if box is not None:
            boxes[o.object_id] = box
    return FrameTruth(
        time=t,
        frame=frame,
        robot_pose=robot,
        object_poses=poses,
        visible_fraction=vis,
        gt_bboxes=boxes,
        clean_depth=clean,
    )


# ---------------------------------------------------------------------------
# synthetic detector
# ---------------------------------------------------------------------------

def _softened_one_hot(label: int, n: int, temperature: float) -> np.ndarray:
    logits = np.zeros(n)
    logits[label] = 1.0
    e = np.exp(logits / temperature - np.max(logits / temperature))
    return e / e.sum()


def _jitter_box(box: BBox2D, sigma: float, camera: CameraModel, rng) -> BBox2D | None:
    if sigma <= 0:
        return box
    j = rng.normal(0.0, sigma, size=4)
    return BBox2D.clipped(
        box.x_min + j[0], box.y_min + j[1], box.x_max + j[2], box.y_max + j[3],
        camera.width, camera.height,
    )


def synth_observe(
    scenario: Scenario, frame: int, rng: np.random.Generator, truth: FrameTruth | None = None
) -> Observation:
    """Render the frame's depth with sensor noise and sample noisy detections."""
    if truth is None:
        truth = frame_truth(scenario, frame)
    det = scenario.detector
    cam = scenario.camera
    depth = truth.clean_depth.depth.copy()
    if scenario.depth_noise_sigma > 0:
        valid = depth > 0.0
        noise = rng.normal(0.0, scenario.depth_noise_sigma, size=depth.shape)
        depth[valid] = np.clip(depth[valid] + noise[valid], cam.near, cam.far)
    detections = []
    n = len(scenario.classes)
    for o in scenario.objects:
        vf = truth.visible_fraction[o.object_id]
        if vf < det.v_min:
            continue
        if rng.random() >= det.p_detect_visible:
            continue
        box = truth.gt_bboxes.get(o.object_id)
        if box is None:
            continue
        box = _jitter_box(box, det.bbox_jitter_sigma, cam, rng)
        if box is None:
            continue
        true_idx = scenario.class_index(o.class_name)
        label = int(rng.choice(n, p=det.confusion[true_idx]))
        detections.append(Detection(box, _softened_one_hot(label, n, det.score_temperature)))
    if det.false_positive_rate > 0:
        for _ in range(rng.poisson(det.false_positive_rate)):
            cx = rng.uniform(0, cam.width)
            cy = rng.uniform(0, cam.height)
            bw = rng.uniform(0.05, 0.25) * cam.width
            bh = rng.uniform(0.05, 0.25) * cam.height
            box = BBox2D.clipped(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2,
                                 cam.width, cam.height)
            scores = rng.dirichlet(np.full(n, 5.0))
            if box is not None:
                detections.append(Detection(box, scores / scores.sum()))
    return Observation(
        time=truth.time,
        frame=frame,
        robot_pose=truth.robot_pose,
        depth=DepthImage(cam.width, cam.height, depth),
        detections=detections,
    )


def frame_rng(scenario: Scenario, frame: int) -> np.random.Generator:
    return np.random.default_rng([scenario.seed, frame])


def observe_frame(
    scenario: Scenario, frame: int, detection_log: dict | None = None
) -> tuple[Observation, FrameTruth]:
    """Observation plus ground truth for one frame. When a detection log is
    supplied it replaces the synthetic detection channel entirely."""
    truth = frame_truth(scenario, frame)
    obs = synth_observe(scenario, frame, frame_rng(scenario, frame), truth=truth)
    if detection_log is not None:
        obs = Observation(
            time=obs.time,
            frame=obs.frame,
            robot_pose=obs.robot_pose,
            depth=obs.depth,
            detections=detection_log.get(frame, []),
        )
    return obs, truth


# ---------------------------------------------------------------------------
# detection-log files (JSON lines)
# ---------------------------------------------------------------------------

def load_detection_log(path, n_classes: int, camera: CameraModel) -> dict:
    """Parse a JSON-lines detection log: one {frame, bbox, scores} per line.

    Score vectors off the simplex by at most 1e-3 are renormalized; larger
    violations raise DetectionLogError with the line number.
    """
    import logging

    log = logging.getLogger(__name__)
    out: dict[int, list] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DetectionLogError(line_no, f"invalid JSON: {e}") from None
            try:
                frame = int(row["frame"])
                bbox = [float(x) for x in row["bbox"]]
                scores = np.asarray(row["scores"], dtype=float)
            except (KeyError, TypeError, ValueError) as e:
                raise DetectionLogError(line_no, f"schema violation: {e!r}") from None
            if frame < 0:
                raise DetectionLogError(line_no, "frame index must be nonnegative")
            if len(bbox) != 4:
                raise DetectionLogError(line_no, "bbox must have 4 entries")
            if scores.shape != (n_classes,):
                raise DetectionLogError(
                    line_no, f"scores length {scores.shape} != class count {n_classes}"
                )
            total = float(scores.sum())
            if abs(total - 1.0) > 1e-3 or np.any(scores < 0):
                raise DetectionLogError(line_no, f"scores sum to {total}, not a simplex")
            if abs(total - 1.0) > 1e-6:
                log.warning("detection log line %d: renormalizing scores (sum=%g)", line_no, total)
                scores = scores / total
            box = BBox2D.clipped(bbox[0], bbox[1], bbox[2], bbox[3], camera.width, camera.height)
            if box is None:
                raise DetectionLogError(line_no, "bbox empty after clipping to image")
            out.setdefault(frame, []).append(Detection(box, scores))
    return out

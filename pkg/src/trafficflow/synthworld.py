"""Deterministic synthetic radar world.

Rigid box actors and static clutter live in a world frame; an ego vehicle
carries a forward-looking radar. Each frame samples noisy surface points,
measures their radial velocity, and records the exact rigid flow of every
measured point to the next scan.

Conventions
-----------
``ego_pose`` maps sensor coordinates at time t to world coordinates. A point
``p`` of frame t has flow ``M p - p`` where ``M`` carries frame-t sensor
coordinates of that point's rigid body to frame-(t+1) sensor coordinates,
so ``p + flow`` lands in the coordinates of the next scan.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import PointCloud, SE3Transform

CLASS_NAMES = {0: "clutter", 1: "car", 2: "pedestrian", 3: "cyclist", 4: "truck"}
# box extent (l, w, h) metres, max speed m/s, mean rcs dBsm
CLASS_PROFILES = {
    1: ((4.5, 1.8, 1.5), 12.0, 10.0),
    2: ((0.6, 0.6, 1.7), 1.8, -5.0),
    3: ((1.8, 0.6, 1.6), 6.0, 0.0),
    4: ((8.0, 2.5, 3.0), 10.0, 15.0),
}
MOVING_THRESHOLD = 0.05  # metres per frame interval
STATIC_ACTOR = 255       # actor_id byte for clutter points

MAGIC = b"RSFR"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIdQ")  # magic, version, reserved, n, frame_index, dt, payload bytes


class FormatError(ValueError):
    """Malformed or incompatible dataset file."""


@dataclass
class RigidActor:
    extent: tuple
    class_id: int
    trajectory: list          # SE3Transform per timestep, actor -> world
    rcs_mean: float
    rcs_std: float = 2.0

    def __post_init__(self):
        if self.class_id not in CLASS_PROFILES:
            raise ValueError(f"unknown class id {self.class_id}")


@dataclass
class RadarFrame:
    positions: np.ndarray
    rrv: np.ndarray
    rcs: np.ndarray
    gt_flow: np.ndarray
    moving_mask: np.ndarray
    class_id: np.ndarray
    ego_pose: SE3Transform
    dt: float
    frame_index: int
    actor_id: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.positions)

    def subset(self, idx) -> "RadarFrame":
        """Frame restricted to the rows ``idx``."""
        idx = np.asarray(idx)
        return RadarFrame(self.positions[idx], self.rrv[idx], self.rcs[idx], self.gt_flow[idx],
                          self.moving_mask[idx], self.class_id[idx], self.ego_pose, self.dt,
                          self.frame_index, None if self.actor_id is None else self.actor_id[idx])

    @property
    def cloud(self) -> PointCloud:
        return PointCloud(self.positions, self.rrv, self.rcs)


@dataclass
class ScenarioConfig:
    actors: tuple = (3, 8)
    actor_speed: tuple = (0.0, 1.0)      # fraction of the class max speed
    static_actor_prob: float = 0.3
    ego_speed: tuple = (0.0, 10.0)
    ego_yaw_rate: float = 0.1            # rad/s, max magnitude
    fov_deg: float = 120.0
    max_range: float = 50.0
    min_range: float = 1.0
    points_per_actor: tuple = (2, 40)
    clutter_points: tuple = (30, 60)
    clutter_pool: int = 400
    rrv_noise: float = 0.1
    position_noise: float = 0.05
    clip_length: int = 5
    dt: float = 0.1
    area: tuple = ((4.0, 45.0), (-20.0, 20.0))
    seed: int = 0

    def __post_init__(self):
        self.actors = tuple(self.actors)
        self.actor_speed = tuple(self.actor_speed)
        self.ego_speed = tuple(self.ego_speed)
        self.points_per_actor = tuple(self.points_per_actor)
        self.clutter_points = tuple(self.clutter_points)
        self.area = tuple(tuple(a) for a in self.area)
        if self.clip_length < 2:
            raise ValueError("clip_length must be >= 2")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.points_per_actor[0] < 1 or self.points_per_actor[0] > self.points_per_actor[1]:
            raise ValueError("bad points_per_actor range")
        if self.actors[0] < 0 or self.actors[0] > self.actors[1]:
            raise ValueError("bad actor count range")

    @classmethod
    def tiny(cls, **kw):
        base = dict(actors=(2, 3), points_per_actor=(4, 12), clutter_points=(12, 20),
                    clutter_pool=120, clip_length=3, area=((5.0, 30.0), (-12.0, 12.0)),
                    max_range=35.0)
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return asdict(self)


# -------------------------------------------------------------- sensor model

def measure_rrv(position, point_velocity, ego_velocity):
    """Radial component of the target velocity relative to the sensor.

    All arguments are in sensor coordinates; accepts single points (3,) or
    batches (N, 3).
    """
    p = np.asarray(position, dtype=np.float64)
    rel = np.asarray(point_velocity, dtype=np.float64) - np.asarray(ego_velocity, dtype=np.float64)
    norm = np.linalg.norm(p, axis=-1)
    if np.any(norm == 0):
        raise ValueError("radial velocity undefined at the sensor origin")
    return np.sum(rel * p, axis=-1) / norm


def relative_motion(pose_t: SE3Transform, pose_t1: SE3Transform) -> SE3Transform:
    """Transform from frame-t sensor coordinates to frame-(t+1) sensor coordinates."""
    if np.array_equal(pose_t.matrix, pose_t1.matrix):
        return SE3Transform.identity()
    return pose_t1.inverse().compose(pose_t)


def ego_velocity(omega: SE3Transform, dt):
    """Sensor velocity in frame-t coordinates implied by the relative motion ``omega``."""
    return omega.inverse().translation / dt


# ---------------------------------------------------------------- scenario

def _planar_pose(x, y, yaw, z=0.0):
    return SE3Transform.from_yaw(yaw, (x, y, z))


def _integrate(x, y, yaw, speed, yaw_rate, dt, steps):
    poses = []
    for _ in range(steps):
        poses.append(_planar_pose(x, y, yaw))
        x += speed * math.cos(yaw) * dt
        y += speed * math.sin(yaw) * dt
        yaw += yaw_rate * dt
    return poses


def build_scenario(cfg: ScenarioConfig, rng: np.random.Generator):
    """Ego trajectory, actors and static clutter for ``clip_length + 1`` steps
    (the extra step defines the flow of the last frame)."""
    steps = cfg.clip_length + 1
    ego_speed = rng.uniform(*cfg.ego_speed)
    ego_yaw_rate = rng.uniform(-cfg.ego_yaw_rate, cfg.ego_yaw_rate)
    ego = _integrate(0.0, 0.0, 0.0, ego_speed, ego_yaw_rate, cfg.dt, steps)
    actors = []
    for _ in range(int(rng.integers(cfg.actors[0], cfg.actors[1] + 1))):
        cls = int(rng.integers(1, 5))
        extent, vmax, rcs = CLASS_PROFILES[cls]
        speed = 0.0 if rng.random() < cfg.static_actor_prob else vmax * rng.uniform(*cfg.actor_speed)
        x = rng.uniform(*cfg.area[0])
        y = rng.uniform(*cfg.area[1])
        yaw = rng.uniform(-math.pi, math.pi)
        yaw_rate = rng.uniform(-0.3, 0.3) if speed > 0 else 0.0
        actors.append(RigidActor(extent, cls, _integrate(x, y, yaw, speed, yaw_rate, cfg.dt, steps), rcs))
    n = cfg.clutter_pool
    clutter = np.stack([rng.uniform(cfg.area[0][0] - 2, cfg.area[0][1] + 10, n),
                        rng.uniform(cfg.area[1][0] - 5, cfg.area[1][1] + 5, n),
                        rng.uniform(0.0, 2.0, n)], axis=1)
    clutter_rcs = rng.normal(0.0, 5.0, n)
    return ego, actors, clutter, clutter_rcs


def _box_surface(extent, n, rng):
    """Uniform samples on the four vertical faces of a box centred at the origin (z from 0)."""
    l, w, h = extent
    perim = 2 * (l + w)
    s = rng.uniform(0, perim, n)
    z = rng.uniform(0.1, h, n)
    pts = np.empty((n, 3))
    for i, si in enumerate(s):
        if si < l:
            pts[i] = (si - l / 2, -w / 2, z[i])
        elif si < l + w:
            pts[i] = (l / 2, si - l - w / 2, z[i])
        elif si < 2 * l + w:
            pts[i] = (l / 2 - (si - l - w), w / 2, z[i])
        else:
            pts[i] = (-l / 2, w / 2 - (si - 2 * l - w), z[i])
    return pts


def actor_motion(actor: RigidActor, t):
    """World-frame pose change ``A_{t+1} A_t^{-1}``, or None when the actor stands still."""
    a_t, a_t1 = actor.trajectory[t], actor.trajectory[t + 1]
    if np.array_equal(a_t.matrix, a_t1.matrix):
        return None
    return a_t1.compose(a_t.inverse())


def _visible(p, cfg: ScenarioConfig):
    r = np.linalg.norm(p, axis=1)
    az = np.degrees(np.arctan2(p[:, 1], p[:, 0]))
    return (r >= cfg.min_range) & (r <= cfg.max_range) & (np.abs(az) <= cfg.fov_deg / 2)


def _sample_frame(t, ego, actors, clutter, clutter_rcs, cfg: ScenarioConfig, rng):
    e_t, e_t1 = ego[t], ego[t + 1]
    to_sensor = e_t.inverse()
    omega_ego = relative_motion(e_t, e_t1)
    v_ego = ego_velocity(omega_ego, cfg.dt)
    chunks = []  # (positions, rrv, rcs, maps (n,4,4), class, actor id, world displacement)
    for a_id, actor in enumerate(actors):
        a_t, a_t1 = actor.trajectory[t], actor.trajectory[t + 1]
        center = to_sensor.transform_points(a_t.translation[None])[0]
        dist = max(np.linalg.norm(center[:2]), 1.0)
        lo, hi = cfg.points_per_actor
        n = int(np.clip(round(hi * min(1.0, 8.0 / dist) * rng.uniform(0.5, 1.0)), lo, hi))
        local = _box_surface(actor.extent, n, rng)
        true_world = a_t.transform_points(local)
        meas = to_sensor.transform_points(true_world) + rng.normal(0, cfg.position_noise, (n, 3))
        # rigid map of the measured point's body between the two scans
        delta = actor_motion(actor, t)
        m = omega_ego if delta is None else e_t1.inverse().compose(delta).compose(e_t)
        vel_world = (a_t1.transform_points(local) - true_world) / cfg.dt
        vel_sensor = vel_world @ e_t.rotation
        rcs = rng.normal(actor.rcs_mean, actor.rcs_std, n)
        if delta is None:
            disp = np.zeros(n)
        else:
            meas_world = e_t.transform_points(meas)
            disp = np.linalg.norm(delta.transform_points(meas_world) - meas_world, axis=1)
        chunks.append((meas, vel_sensor, rcs, m, actor.class_id, a_id, disp))
    lo, hi = cfg.clutter_points
    in_view = np.flatnonzero(_visible(to_sensor.transform_points(clutter), cfg))
    take = min(len(in_view), int(rng.integers(lo, hi + 1)))
    sel = np.sort(rng.choice(in_view, take, replace=False)) if take else np.zeros(0, dtype=np.int64)
    meas = to_sensor.transform_points(clutter[sel]) + rng.normal(0, cfg.position_noise, (take, 3))
    chunks.append((meas, np.zeros((take, 3)), clutter_rcs[sel], omega_ego, 0, STATIC_ACTOR, np.zeros(take)))

    pos_l, flow_l, rrv_l, rcs_l, cls_l, aid_l, mov_l = [], [], [], [], [], [], []
    for meas, vel, rcs, m, cls, a_id, disp in chunks:
        keep = _visible(meas, cfg)
        meas, vel, rcs, disp = meas[keep], vel[keep], rcs[keep], disp[keep]
        if len(meas) == 0:
            continue
        pos_l.append(meas)
        flow_l.append(m.transform_points(meas) - meas)
        rrv_l.append(measure_rrv(meas, vel, v_ego) + rng.normal(0, cfg.rrv_noise, len(meas)))
        rcs_l.append(rcs)
        cls_l.append(np.full(len(meas), cls, dtype=np.uint8))
        aid_l.append(np.full(len(meas), a_id, dtype=np.uint8))
        mov_l.append(disp > MOVING_THRESHOLD)
    if not pos_l:
        return None
    return RadarFrame(
        positions=np.concatenate(pos_l), rrv=np.concatenate(rrv_l), rcs=np.concatenate(rcs_l),
        gt_flow=np.concatenate(flow_l), moving_mask=np.concatenate(mov_l),
        class_id=np.concatenate(cls_l), ego_pose=e_t, dt=cfg.dt, frame_index=t,
        actor_id=np.concatenate(aid_l))


def simulate_sequence(cfg: ScenarioConfig, max_redraws=20, return_scenario=False):
    """Generate ``clip_length`` frames; deterministic under ``cfg.seed``.

    A frame without any visible point is redrawn with fresh surface samples.
    With ``return_scenario`` the ego trajectory and actors are returned too.
    """
    rng = np.random.default_rng(cfg.seed)
    ego, actors, clutter, clutter_rcs = build_scenario(cfg, rng)
    frames = []
    for t in range(cfg.clip_length):
        for _ in range(max_redraws):
            frame = _sample_frame(t, ego, actors, clutter, clutter_rcs, cfg, rng)
            if frame is not None:
                break
        else:
            raise RuntimeError(f"frame {t}: no visible points after {max_redraws} draws")
        frames.append(frame)
    if return_scenario:
        return frames, ego, actors
    return frames


# ------------------------------------------------------------------ labels

def rigid_map(frame: RadarFrame, point, ego, actors):
    """Rigid transform carrying ``point`` of ``frame`` to the next scan's sensor coordinates."""
    t = frame.frame_index
    a_id = int(frame.actor_id[point])
    e_t, e_t1 = ego[t], ego[t + 1]
    delta = None if a_id == STATIC_ACTOR else actor_motion(actors[a_id], t)
    if delta is None:
        return relative_motion(e_t, e_t1)
    return e_t1.inverse().compose(delta).compose(e_t)


def derive_gt_flow(frame: RadarFrame, next_pose: SE3Transform, actor_motions: dict,
                   threshold=MOVING_THRESHOLD):
    """Rigid flow and moving mask of ``frame``'s points.

    ``actor_motions`` maps actor id to the world-frame pose change
    ``A_{t+1} A_t^{-1}`` of that actor (None or absent for a standing
    actor); clutter points are world-static.
    """
    pos = frame.positions
    omega = relative_motion(frame.ego_pose, next_pose)
    flow = omega.transform_points(pos) - pos
    moving = np.zeros(len(pos), dtype=bool)
    world = frame.ego_pose.transform_points(pos)
    for a_id, delta in actor_motions.items():
        sel = frame.actor_id == a_id
        if delta is None or not sel.any():
            continue
        m = next_pose.inverse().compose(delta).compose(frame.ego_pose)
        flow[sel] = m.transform_points(pos[sel]) - pos[sel]
        moving[sel] = np.linalg.norm(delta.transform_points(world[sel]) - world[sel], axis=1) > threshold
    return flow, moving


def derive_pseudo_labels(frame: RadarFrame, odometry: SE3Transform, compensated=False, threshold=0.5):
    """Seg pseudo-mask, foreground and background pseudo-flow.

    ``odometry`` is the (possibly noisy) frame-t to frame-(t+1) sensor
    transform. A point is flagged moving when its RRV departs from the rate
    a static target would show under that ego motion by more than
    ``threshold`` m/s. For an ego-compensated frame the RRV already has the
    ego component removed, so static targets read zero.
    """
    pos = frame.positions
    norms = np.linalg.norm(pos, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    if compensated:
        expected = np.zeros(len(pos))
        bg = np.zeros_like(pos)
    else:
        expected = -(pos @ ego_velocity(odometry, frame.dt)) / safe
        bg = odometry.transform_points(pos) - pos
    mask = np.abs(frame.rrv - expected) > threshold
    fg = frame.gt_flow.copy()
    return mask, fg, bg


def quantize(frame: RadarFrame) -> RadarFrame:
    """The frame as stored on disk (float32 arrays read back as float64)."""
    f32 = lambda a: np.asarray(a, dtype="<f4").astype(np.float64)
    pose = np.asarray(frame.ego_pose.matrix, dtype="<f4").astype(np.float64)
    return RadarFrame(f32(frame.positions), f32(frame.rrv), f32(frame.rcs), f32(frame.gt_flow),
                      np.asarray(frame.moving_mask, dtype=bool), np.asarray(frame.class_id, dtype=np.uint8),
                      SE3Transform(pose, check=False), float(frame.dt), int(frame.frame_index),
                      None if frame.actor_id is None else np.asarray(frame.actor_id, dtype=np.uint8))


# ----------------------------------------------------------- serialization

def payload_size(n):
    return 4 * (3 * n + n + n + 3 * n) + n + n + 4 * 16 + n


def encode_frame(frame: RadarFrame) -> bytes:
    n = len(frame)
    actor = frame.actor_id if frame.actor_id is not None else np.full(n, STATIC_ACTOR, dtype=np.uint8)
    body = b"".join([
        np.asarray(frame.positions, dtype="<f4").tobytes(),
        np.asarray(frame.rrv, dtype="<f4").tobytes(),
        np.asarray(frame.rcs, dtype="<f4").tobytes(),
        np.asarray(frame.gt_flow, dtype="<f4").tobytes(),
        np.asarray(frame.moving_mask, dtype=np.uint8).tobytes(),
        np.asarray(frame.class_id, dtype=np.uint8).tobytes(),
        np.asarray(frame.ego_pose.matrix, dtype="<f4").tobytes(),
        np.asarray(actor, dtype=np.uint8).tobytes(),
    ])
    assert len(body) == payload_size(n)
    return _HEADER.pack(MAGIC, VERSION, 0, n, int(frame.frame_index), float(frame.dt), len(body)) + body


def decode_frame(data: bytes) -> RadarFrame:
    if len(data) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, _, n, index, dt, size = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if size != payload_size(n):
        raise FormatError("header payload size disagrees with point count")
    if len(data) != _HEADER.size + size:
        raise FormatError(f"expected {_HEADER.size + size} bytes, found {len(data)}")
    off = _HEADER.size

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    pos = take("<f4", 3 * n).reshape(n, 3).astype(np.float64)
    rrv = take("<f4", n).astype(np.float64)
    rcs = take("<f4", n).astype(np.float64)
    flow = take("<f4", 3 * n).reshape(n, 3).astype(np.float64)
    moving = take(np.uint8, n).astype(bool)
    cls = take(np.uint8, n).copy()
    pose = take("<f4", 16).reshape(4, 4).astype(np.float64)
    actor = take(np.uint8, n).copy()
    return RadarFrame(pos, rrv, rcs, flow, moving, cls, SE3Transform(pose, check=False), dt, index, actor)


def write_sequence(frames, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for f in frames:
        (directory / f"frame_{f.frame_index:04d}.bin").write_bytes(encode_frame(f))


def read_sequence(directory):
    files = sorted(Path(directory).glob("frame_*.bin"))
    if not files:
        raise FormatError(f"no frames in {directory}")
    return [decode_frame(p.read_bytes()) for p in files]


# ---------------------------------------------------------------- datasets

def generate_dataset(root, cfg: ScenarioConfig, num_train, num_test, seed=None):
    """Write ``num_train + num_test`` sequences and a manifest; returns the manifest dict.

    Sequence ``i`` uses seed ``base * 100003 + i`` so splits never share scenes.
    """
    root = Path(root)
    base = cfg.seed if seed is None else seed
    manifest = {"version": VERSION, "scenario": cfg.to_dict(), "train": [], "test": []}
    for i in range(num_train + num_test):
        name = f"seq_{i:04d}"
        seq_cfg = ScenarioConfig(**{**cfg.to_dict(), "seed": base * 100003 + i})
        write_sequence(simulate_sequence(seq_cfg), root / name)
        manifest["train" if i < num_train else "test"].append(name)
    text = json.dumps(manifest, indent=2, sort_keys=True)
    (root / "manifest.json").write_text(text)
    return json.loads(text)


def load_manifest(root):
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest in {root}")
    return json.loads(path.read_text())


def load_split(root, split):
    manifest = load_manifest(root)
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    return [read_sequence(Path(root) / name) for name in manifest[split]]


def manifest_hash(root):
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()


def dataset_hash(root):
    """Hash over the manifest and every frame file, in sorted order."""
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()

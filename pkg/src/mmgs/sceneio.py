"""Scene and checkpoint persistence plus the procedural synthetic-scene
generator (capsule humans on a 4-joint chain, surface-sampled box objects,
teacher Gaussians rendered to ground truth by the reference rasterizer).

scene.json schema (version 1):
{"version":1,
 "cameras":[{"id","K":[9],"R":[9],"t":[3],"width","height"}],
 "instances":[{"id","kind":"human"|"object","template":path}],
 "frames":[{"index","images":{cam:path},"masks":{cam:path},
            "poses":{inst:path}}]}

Checkpoint binary: magic "MMGS", u32 version=1, u32 tensor count; per
tensor u16 name length, UTF-8 name, u8 dtype code (0 = f32), u8 rank,
u32 dims[rank], little-endian payload; then a u32-length-prefixed UTF-8
JSON config echo.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from . import imgio
from .deformation import JointTransforms, RigidPose, SkinnedTemplate
from .gaussians import Camera, GaussianSet, concat_gaussian_sets
from .rasterizer import rasterize_reference

CHECKPOINT_MAGIC = b"MMGS"
CHECKPOINT_VERSION = 1
_DTYPE_F32 = 0


class SceneFormatError(ValueError):
    """Schema violation; the message carries a JSON pointer."""


@dataclass
class InstanceRecord:
    id: int
    kind: str
    template: SkinnedTemplate
    template_path: str


@dataclass
class Frame:
    index: int
    images: dict
    masks: dict
    poses: dict
    image_paths: dict
    mask_paths: dict
    pose_paths: dict


@dataclass
class Scene:
    root: str
    cameras: dict
    instances: list
    frames: list

    def to_manifest(self):
        return {
            "version": 1,
            "cameras": [
                {
                    "id": cid,
                    "K": [float(v) for v in cam.K.reshape(-1)],
                    "R": [float(v) for v in cam.R.reshape(-1)],
                    "t": [float(v) for v in cam.t.reshape(-1)],
                    "width": cam.width,
                    "height": cam.height,
                }
                for cid, cam in sorted(self.cameras.items())
            ],
            "instances": [
                {"id": inst.id, "kind": inst.kind, "template": inst.template_path}
                for inst in self.instances
            ],
            "frames": [
                {
                    "index": f.index,
                    "images": {str(c): p for c, p in sorted(f.image_paths.items())},
                    "masks": {str(c): p for c, p in sorted(f.mask_paths.items())},
                    "poses": {str(i): p for i, p in sorted(f.pose_paths.items())},
                }
                for f in self.frames
            ],
        }


def _need(obj, key, ptr, kind=None):
    if key not in obj:
        raise SceneFormatError(f"missing {key!r} at {ptr}")
    val = obj[key]
    if kind is not None and not isinstance(val, kind):
        raise SceneFormatError(f"wrong type for {key!r} at {ptr}/{key}")
    return val


def load_template(path):
    with open(path) as f:
        data = json.load(f)
    kind = data.get("kind", "object")
    verts = np.asarray(_need(data, "vertices", f"template {path}"), dtype=np.float64)
    weights = data.get("weights")
    offsets = data.get("offsets")
    try:
        return SkinnedTemplate(
            verts,
            None if weights is None else np.asarray(weights, dtype=np.float64),
            None if offsets is None else np.asarray(offsets, dtype=np.float64),
            kind=kind,
        )
    except ValueError as e:
        raise SceneFormatError(f"template {path}: {e}") from e


def load_pose(path, kind):
    with open(path) as f:
        data = json.load(f)
    if kind == "human":
        mats = np.asarray(data, dtype=np.float64)
        if mats.ndim == 2 and mats.shape[1] == 16:
            mats = mats.reshape(-1, 4, 4)
        if mats.ndim != 3 or mats.shape[1:] != (4, 4):
            raise SceneFormatError(
                f"pose {path}: expected K 4x4 row-major matrices"
            )
        return JointTransforms.from_matrices(mats)
    mat = np.asarray(data, dtype=np.float64).reshape(-1)
    if mat.size != 16:
        raise SceneFormatError(f"pose {path}: expected one 4x4 row-major matrix")
    return RigidPose.from_matrix(mat.reshape(4, 4))


def load_scene(directory):
    """Load and validate a scene directory (see module docstring schema)."""
    manifest_path = os.path.join(directory, "scene.json")
    if not os.path.exists(manifest_path):
        raise SceneFormatError(f"no scene.json under {directory}")
    with open(manifest_path) as f:
        data = json.load(f)
    if data.get("version") != 1:
        raise SceneFormatError("unsupported scene version at /version")

    cameras = {}
    for i, cam in enumerate(_need(data, "cameras", "/", list)):
        ptr = f"/cameras/{i}"
        cid = _need(cam, "id", ptr, int)
        if cid in cameras:
            raise SceneFormatError(f"duplicate camera id {cid} at {ptr}/id")
        K = np.asarray(_need(cam, "K", ptr, list), dtype=np.float64)
        R = np.asarray(_need(cam, "R", ptr, list), dtype=np.float64)
        t = np.asarray(_need(cam, "t", ptr, list), dtype=np.float64)
        if K.size != 9:
            raise SceneFormatError(f"K must have 9 entries at {ptr}/K")
        if R.size != 9 or t.size != 3:
            raise SceneFormatError(f"bad extrinsics at {ptr}")
        W = np.concatenate([R.reshape(3, 3), t.reshape(3, 1)], axis=1)
        try:
            cameras[cid] = Camera(
                cid, K.reshape(3, 3), W,
                _need(cam, "width", ptr, int), _need(cam, "height", ptr, int),
            )
        except ValueError as e:
            raise SceneFormatError(f"{e} at {ptr}") from e

    instances = []
    seen_ids = set()
    for i, inst in enumerate(_need(data, "instances", "/", list)):
        ptr = f"/instances/{i}"
        iid = _need(inst, "id", ptr, int)
        if iid in seen_ids:
            raise SceneFormatError(f"duplicate instance id {iid} at {ptr}/id")
        seen_ids.add(iid)
        kind = _need(inst, "kind", ptr, str)
        if kind not in ("human", "object"):
            raise SceneFormatError(f"kind must be human|object at {ptr}/kind")
        tpath = _need(inst, "template", ptr, str)
        template = load_template(os.path.join(directory, tpath))
        if kind == "human" and template.skinning_weights is None:
            raise SceneFormatError(
                f"human template without skinning weights at {ptr}/template"
            )
        if kind == "object" and template.skinning_weights is not None:
            raise SceneFormatError(
                f"object template carries skinning weights at {ptr}/template"
            )
        instances.append(InstanceRecord(iid, kind, template, tpath))

    frames = []
    for i, fr in enumerate(_need(data, "frames", "/", list)):
        ptr = f"/frames/{i}"
        index = _need(fr, "index", ptr, int)
        image_paths = {int(k): v for k, v in _need(fr, "images", ptr, dict).items()}
        mask_paths = {int(k): v for k, v in _need(fr, "masks", ptr, dict).items()}
        pose_paths = {int(k): v for k, v in _need(fr, "poses", ptr, dict).items()}
        missing = set(pose_paths) ^ seen_ids
        if missing:
            raise SceneFormatError(
                f"frame must reference every instance exactly once; mismatch "
                f"{sorted(missing)} at {ptr}/poses"
            )
        images, masks, poses = {}, {}, {}
        for cid, cam in cameras.items():
            if cid not in image_paths:
                raise SceneFormatError(f"missing image for camera {cid} at {ptr}/images")
            if cid not in mask_paths:
                raise SceneFormatError(f"missing mask for camera {cid} at {ptr}/masks")
            img = imgio.read_png(os.path.join(directory, image_paths[cid]))
            if img.shape[:2] != (cam.height, cam.width):
                raise SceneFormatError(
                    f"image size {img.shape[:2]} does not match camera "
                    f"{cid} ({cam.height},{cam.width}) at {ptr}/images/{cid}"
                )
            mask = imgio.read_png_ids(os.path.join(directory, mask_paths[cid]))
            if mask.shape != (cam.height, cam.width):
                raise SceneFormatError(
                    f"mask size mismatch for camera {cid} at {ptr}/masks/{cid}"
                )
            legal = {0} | {inst.id + 1 for inst in instances}
            present = set(np.unique(mask).tolist())
            bad = present - legal
            if bad:
                raise SceneFormatError(
                    f"mask value {sorted(bad)[0]} matches no instance at "
                    f"{ptr}/masks/{cid}"
                )
            images[cid] = img
            masks[cid] = mask
        for inst in instances:
            try:
                poses[inst.id] = load_pose(
                    os.path.join(directory, pose_paths[inst.id]), inst.kind
                )
            except (OSError, ValueError) as e:
                raise SceneFormatError(
                    f"frame {index}, instance {inst.id}: cannot load pose "
                    f"({e}) at {ptr}/poses/{inst.id}"
                ) from e
        frames.append(Frame(index, images, masks, poses,
                            image_paths, mask_paths, pose_paths))

    return Scene(str(directory), cameras, instances, frames)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    tensors: dict
    config: dict


def save_checkpoint(state, path):
    """Serialize named tensors + config echo; atomic write-temp-rename."""
    tensors = {name: t.data for name, t in state.named_tensors().items()}
    config = dict(state.config.__dict__)
    config["train_camera_ids"] = list(state.train_camera_ids)
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<BB", _DTYPE_F32, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    echo = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(echo))
    blob += echo
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data):
        self.data = data
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.data):
            raise ValueError(
                f"truncated checkpoint: needed {n} bytes for {what} at byte "
                f"{self.off}, file has {len(self.data)}"
            )
        out = self.data[self.off : self.off + n]
        self.off += n
        return out


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    version, count = struct.unpack("<II", r.take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2, "name length"))
        name = r.take(name_len, "name").decode("utf-8")
        dtype_code, rank = struct.unpack("<BB", r.take(2, "dtype/rank"))
        if dtype_code != _DTYPE_F32:
            raise ValueError(f"unknown dtype code {dtype_code} for {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        payload = r.take(4 * int(np.prod(dims, dtype=np.int64)), f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    (echo_len,) = struct.unpack("<I", r.take(4, "config length"))
    config = json.loads(r.take(echo_len, "config echo").decode("utf-8"))
    return Checkpoint(tensors, config)


def restore_state(scene, checkpoint):
    """Rebuild a TrainState from a checkpoint's config echo and tensors."""
    from .pipeline import TrainConfig, TrainState

    config_fields = dict(checkpoint.config)
    train_ids = config_fields.pop("train_camera_ids", [])
    config = TrainConfig(**{**config_fields, "train_camera_ids": train_ids})
    state = TrainState(scene, config)
    named = state.named_tensors()
    missing = set(named) - set(checkpoint.tensors)
    extra = set(checkpoint.tensors) - set(named)
    if missing or extra:
        raise ValueError(
            f"checkpoint does not match scene: missing {sorted(missing)[:3]}, "
            f"unexpected {sorted(extra)[:3]}"
        )
    for name, tensor in named.items():
        src = checkpoint.tensors[name]
        if src.shape != tensor.data.shape:
            raise ValueError(
                f"shape mismatch for {name}: {src.shape} vs {tensor.data.shape}"
            )
        tensor.data = src.astype(tensor.data.dtype).copy()
    return state


# ---------------------------------------------------------------------------
# synthetic scene generation
# ---------------------------------------------------------------------------

_CAPSULE_SEGMENTS = [
    # spread-limb rest configuration: torso, head, two arms
    ((0.0, 0.0, 0.0), (0.0, 0.0, 0.50)),
    ((0.0, 0.0, 0.50), (0.0, 0.0, 0.78)),
    ((0.0, 0.0, 0.45), (-0.42, 0.0, 0.58)),
    ((0.0, 0.0, 0.45), (0.42, 0.0, 0.58)),
]
_CAPSULE_RADIUS = 0.07


def _sample_capsule_human(rng, vertices_per_segment=50):
    pts = []
    for a, b in _CAPSULE_SEGMENTS:
        a, b = np.asarray(a), np.asarray(b)
        t = rng.uniform(0, 1, vertices_per_segment)
        axis = b - a
        # radial frame perpendicular to the segment
        ref = np.array([1.0, 0.0, 0.0])
        if abs(axis @ ref) > 0.9 * np.linalg.norm(axis):
            ref = np.array([0.0, 1.0, 0.0])
        u = np.cross(axis, ref)
        u /= np.linalg.norm(u)
        v = np.cross(axis, u)
        v /= np.linalg.norm(v)
        ang = rng.uniform(0, 2 * np.pi, vertices_per_segment)
        rad = _CAPSULE_RADIUS * np.sqrt(rng.uniform(0.4, 1.0, vertices_per_segment))
        pts.append(
            a[None, :] + t[:, None] * axis[None, :]
            + rad[:, None] * (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v)
        )
    return np.concatenate(pts), _CAPSULE_SEGMENTS


def _segment_distances(points, segments):
    d = []
    for a, b in segments:
        a, b = np.asarray(a), np.asarray(b)
        ab = b - a
        t = np.clip(((points - a) @ ab) / (ab @ ab), 0.0, 1.0)
        proj = a[None, :] + t[:, None] * ab[None, :]
        d.append(np.linalg.norm(points - proj, axis=1))
    return np.stack(d, axis=1)


def _human_weights(points, segments):
    d = _segment_distances(points, segments)
    w = 1.0 / (d + 1e-3) ** 2
    return w / w.sum(axis=1, keepdims=True)


def _sample_box_object(rng, count=100, half_extents=(0.16, 0.11, 0.13)):
    hx, hy, hz = half_extents
    faces = rng.integers(0, 6, count)
    u = rng.uniform(-1, 1, count)
    v = rng.uniform(-1, 1, count)
    pts = np.empty((count, 3))
    for i, (f, uu, vv) in enumerate(zip(faces, u, v)):
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        coords = [uu * hx, vv * hy, 0]
        if axis == 0:
            pts[i] = (sign * hx, uu * hy, vv * hz)
        elif axis == 1:
            pts[i] = (uu * hx, sign * hy, vv * hz)
        else:
            pts[i] = (uu * hx, vv * hy, sign * hz)
    return pts


def _rot_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    c, s = np.cos(angle), np.sin(angle)
    x, y, z = axis
    return np.array(
        [
            [c + x * x * (1 - c), x * y * (1 - c) - z * s, x * z * (1 - c) + y * s],
            [y * x * (1 - c) + z * s, c + y * y * (1 - c), y * z * (1 - c) - x * s],
            [z * x * (1 - c) - y * s, z * y * (1 - c) + x * s, c + z * z * (1 - c)],
        ]
    )


def _human_joint_transforms(rng_params, frame_phase, base_position, facing):
    """World transforms for the 4 chain joints at one frame."""
    amps, phases, axes = rng_params
    Rg = _rot_axis_angle([0, 0, 1], facing)
    rotations, translations = [], []
    for k, (a, b) in enumerate(_CAPSULE_SEGMENTS):
        pivot = np.asarray(a)
        theta = amps[k] * np.sin(2 * np.pi * frame_phase + phases[k])
        R_loc = _rot_axis_angle(axes[k], theta)
        R_k = Rg @ R_loc
        t_k = Rg @ (pivot - R_loc @ pivot) + base_position
        rotations.append(R_k)
        translations.append(t_k)
    return JointTransforms(np.stack(rotations), np.stack(translations))


def _teacher_attributes(rng, centers, bands=4, texture=0.25):
    v = centers.shape[0]
    diff = centers[:, None, :] - centers[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    base_scale = 0.5 * float(np.sqrt(d2.min(axis=1)).mean())
    sh = np.zeros((v, bands, 3), dtype=np.float32)
    tint = rng.uniform(-0.9, 0.9, (1, 3))
    sh[:, 0, :] = np.clip(tint + rng.normal(0, texture, (v, 3)), -1.2, 1.2)
    sh[:, 1:, :] = rng.uniform(-0.08, 0.08, (v, bands - 1, 3))
    quats = np.zeros((v, 4), dtype=np.float32)
    quats[:, 0] = 1.0
    quats += rng.normal(0, 0.05, (v, 4)).astype(np.float32)
    return GaussianSet(
        centers=centers.astype(np.float32),
        sh_coeffs=sh,
        opacity_logit=rng.uniform(0.8, 1.6, v).astype(np.float32),
        rotation=quats,
        log_scale=np.log(
            base_scale * rng.uniform(0.9, 1.3, (v, 3))
        ).astype(np.float32),
    )


def _pose_teacher(template, pose, teacher, kind):
    from .deformation import pose_human, pose_object

    if kind == "human":
        return pose_human(template, pose, teacher, modulator=None)
    return pose_object(template, pose, teacher)


def _aabb(points):
    return points.min(axis=0), points.max(axis=0)


def _overlap(box_a, box_b):
    return bool(np.all(box_a[0] <= box_b[1]) and np.all(box_b[0] <= box_a[1]))


def generate_synthetic_scene(out_dir, humans=2, objects=1, cameras=4,
                             frames=3, resolution=(64, 64), seed=7):
    """Build a fully deterministic synthetic scene directory.

    Capsule humans articulate smoothly on a 4-joint chain; box objects
    follow rigid trajectories, with the first object pulled into contact
    with the first human at the middle frame so the scene graph always
    has at least one edge. Ground truth comes from the reference renderer
    over teacher Gaussian sets; masks assign each pixel to the instance
    whose solo render is most opaque there (threshold 0.5).
    """
    if humans < 1 or cameras < 1 or frames < 1:
        raise ValueError("need at least one human, camera, and frame")
    width, height = resolution
    if min(width, height) < 32:
        raise ValueError("resolution must be at least 32")
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("templates", "poses", "images", "masks"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    # --- instances -------------------------------------------------------
    # the first two humans stand still facing each other and jointly carry
    # the first object between them; that pins interaction edges
    # (human0, obj) and (human1, obj) in every frame while keeping the two
    # humans apart, so the graph neighborhoods stay distinct
    records = []
    templates = {}
    motion = {}
    iid = 0
    human_spots = np.linspace(-0.45, 0.45, humans) if humans > 1 else np.array([0.0])
    for h in range(humans):
        pts, segments = _sample_capsule_human(rng)
        weights = _human_weights(pts, segments)
        tpl = SkinnedTemplate(pts, weights, kind="human")
        templates[iid] = tpl
        amps = np.deg2rad(rng.uniform(5, 25, 4))
        amps[0] *= 0.3  # keep the torso steadier than the limbs
        phases = rng.uniform(0, 2 * np.pi, 4)
        axes = rng.normal(size=(4, 3))
        base = np.array([human_spots[h], rng.uniform(-0.1, 0.1), 0.0])
        facing = rng.uniform(0, 2 * np.pi)
        drift = rng.uniform(-0.05, 0.05, 3) * [1, 1, 0]
        if h < 2 and humans >= 2 and objects >= 1:
            amps = np.minimum(amps, np.deg2rad(12.0))
            axes = np.broadcast_to([0.0, 1.0, 0.0], (4, 3)).copy()
            base = np.array([human_spots[h], -0.12 if h == 0 else 0.12, 0.0])
            facing = 0.0
            drift = np.zeros(3)
        motion[iid] = ("human", (amps, phases, axes), base, facing, drift)
        records.append((iid, "human"))
        iid += 1
    human0 = motion[records[0][0]]
    for o in range(objects):
        pts = _sample_box_object(rng)
        templates[iid] = SkinnedTemplate(pts, None, kind="object")
        center0 = np.array([rng.uniform(-0.4, 0.4), rng.uniform(0.25, 0.5), 0.35])
        spin_axis = rng.normal(size=3)
        spin_rate = rng.uniform(-0.4, 0.4)
        velocity = rng.uniform(-0.08, 0.08, 3) * [1, 1, 0.3]
        if o == 0:
            if humans >= 2:
                # carried between the first two standing humans at arm height
                center0 = np.array([0.0, 0.0, 0.5])
            else:
                center0 = human0[2] + np.array([0.25, 0.0, 0.5])
            spin_rate *= 0.25
            velocity = np.zeros(3)
        motion[iid] = ("object", (spin_axis, spin_rate), center0, 0.0, velocity)
        records.append((iid, "object"))
        iid += 1

    # object poses written to disk carry a small rigid miscalibration (the
    # teacher renders the true poses); recovering it is the geometric job
    # of the interaction stage, which is the only path that moves centers
    pose_noise = {}
    for inst_id, kind in records:
        if kind == "object":
            direction = rng.normal(size=3)
            pose_noise[inst_id] = 0.045 * direction / np.linalg.norm(direction)

    # --- per-frame poses --------------------------------------------------
    def poses_at(frame_idx, object_shift):
        phase = frame_idx / max(frames, 1)
        out = {}
        for inst_id, kind in records:
            knd, p, base, facing, drift = motion[inst_id]
            if knd == "human":
                out[inst_id] = _human_joint_transforms(
                    p, phase, base + drift * frame_idx, facing
                )
            else:
                spin_axis, spin_rate = p
                R = _rot_axis_angle(spin_axis, spin_rate * frame_idx)
                center = base + drift * frame_idx + object_shift.get(inst_id, 0.0)
                out[inst_id] = RigidPose(R, center)
        return out

    # pull the first object into contact with the first human at the middle
    # frame so at least one interaction edge is guaranteed
    object_shift = {}
    object_ids = [i for i, k in records if k == "object"]
    if object_ids:
        mid = frames // 2
        probe = poses_at(mid, {})
        human_id = records[0][0]
        hpose = probe[human_id]
        tpl = templates[human_id]
        posed = np.zeros_like(tpl.canonical_centers)
        for k in range(4):
            posed += tpl.skinning_weights[:, k : k + 1] * (
                tpl.canonical_centers @ hpose.rotations[k].T + hpose.translations[k]
            )
        human_box = _aabb(posed)
        obj_id = object_ids[0]
        obj_tpl = templates[obj_id]
        obj_pose = probe[obj_id]
        obj_pts = obj_tpl.canonical_centers @ obj_pose.rotation.T + obj_pose.translation
        obj_box = _aabb(obj_pts)
        if not _overlap(human_box, obj_box):
            target = 0.5 * (human_box[0] + human_box[1])
            target[2] = human_box[0][2] + 0.6 * (human_box[1][2] - human_box[0][2])
            obj_center = 0.5 * (obj_box[0] + obj_box[1])
            object_shift[obj_id] = target - obj_center

    # --- cameras ----------------------------------------------------------
    cams = {}
    ring_radius = 2.3
    focal = 1.05 * min(width, height)
    for c in range(cameras):
        ang = 2 * np.pi * c / cameras
        eye = np.array(
            [ring_radius * np.cos(ang), ring_radius * np.sin(ang),
             0.55 + 0.25 * (c % 2)]
        )
        cams[c] = Camera.look_at(c, eye, [0.0, 0.0, 0.35], [0, 0, 1],
                                 focal, width, height)

    # --- teacher Gaussians and ground truth -------------------------------
    # objects carry higher-frequency texture so geometric misalignment
    # costs appearance fidelity that opacity/color fuzzing cannot recover
    teachers = {
        inst_id: _teacher_attributes(
            rng, templates[inst_id].canonical_centers,
            texture=0.4 if kind == "object" else 0.25,
        )
        for inst_id, kind in records
    }

    manifest_frames = []
    scene_frames = []
    for f in range(frames):
        poses = poses_at(f, object_shift)
        student_poses = {
            inst_id: (
                RigidPose(poses[inst_id].rotation,
                          poses[inst_id].translation + pose_noise[inst_id])
                if kind == "object"
                else poses[inst_id]
            )
            for inst_id, kind in records
        }
        posed_sets = {
            inst_id: _pose_teacher(templates[inst_id], poses[inst_id],
                                   teachers[inst_id], kind)
            for inst_id, kind in records
        }
        ordered = [posed_sets[i] for i, _ in records]
        joint = concat_gaussian_sets(ordered)
        image_paths, mask_paths, pose_paths = {}, {}, {}
        images, masks = {}, {}
        for cid, cam in cams.items():
            gt = rasterize_reference(joint, cam).array()
            solo_alpha = np.stack(
                [
                    rasterize_reference(posed_sets[i], cam).alpha
                    for i, _ in records
                ]
            )
            best = np.argmax(solo_alpha, axis=0)
            covered = solo_alpha.max(axis=0) > 0.5
            mask = np.where(covered, best + 1, 0).astype(np.int32)
            # remap positional index -> instance id + 1
            remap = np.array([0] + [i + 1 for i, _ in records])
            mask = remap[mask]
            img_rel = f"images/f{f:03d}_c{cid}.png"
            mask_rel = f"masks/f{f:03d}_c{cid}.png"
            imgio.write_png(os.path.join(out_dir, img_rel), gt)
            imgio.write_png_ids(os.path.join(out_dir, mask_rel), mask)
            image_paths[cid] = img_rel
            mask_paths[cid] = mask_rel
            images[cid] = imgio.read_png(os.path.join(out_dir, img_rel))
            masks[cid] = mask
        for inst_id, kind in records:
            pose_rel = f"poses/f{f:03d}_i{inst_id}.json"
            pose_paths[inst_id] = pose_rel
            pose = student_poses[inst_id]
            if kind == "human":
                mats = []
                for k in range(pose.joint_count):
                    m = np.eye(4)
                    m[:3, :3] = pose.rotations[k]
                    m[:3, 3] = pose.translations[k]
                    mats.append([float(v) for v in m.reshape(-1)])
                payload = mats
            else:
                m = np.eye(4)
                m[:3, :3] = pose.rotation
                m[:3, 3] = pose.translation
                payload = [float(v) for v in m.reshape(-1)]
            with open(os.path.join(out_dir, pose_rel), "w") as fh:
                json.dump(payload, fh)
        scene_frames.append(
            Frame(f, images, masks, student_poses,
                  image_paths, mask_paths, pose_paths)
        )
        manifest_frames.append((f, image_paths, mask_paths, pose_paths))

    instances = []
    for inst_id, kind in records:
        tpl = templates[inst_id]
        tpl_rel = f"templates/instance_{inst_id}.json"
        payload = {
            "kind": kind,
            "vertices": [[float(v) for v in row] for row in tpl.canonical_centers],
        }
        if tpl.skinning_weights is not None:
            payload["weights"] = [
                [float(v) for v in row] for row in tpl.skinning_weights
            ]
        with open(os.path.join(out_dir, tpl_rel), "w") as fh:
            json.dump(payload, fh)
        instances.append(InstanceRecord(inst_id, kind, tpl, tpl_rel))

    scene = Scene(str(out_dir), cams, instances, scene_frames)
    with open(os.path.join(out_dir, "scene.json"), "w") as fh:
        json.dump(scene.to_manifest(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return scene

"""Task-space skeleton motion ingestion, contact labeling, rest-pose checks.

Canonical motion format is a JSON document:

    {
      "fps": 30.0,
      "bones": [{"name": "pelvis", "parent": null}, ...],
      "rest_pose": {"pelvis": {"pos": [x,y,z], "quat": [w,x,y,z]}, ...},
      "frames": [{"pelvis": {"pos": ..., "quat": ...}, ...}, ...],
      "contacts": {"left_foot": [true, ...], "right_foot": [...]}   # optional
    }

Positions are meters in the world frame, quaternions w-first and normalized
on ingest (rejected when off unit norm by more than 1e-3). Loaded motions
are immutable in practice (arrays are freshly built per load) and safe to
share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core_math import Transform, quat_normalize

QUAT_NORM_TOL = 1e-3


class MotionError(ValueError):
    pass


@dataclass
class SkeletonMotion:
    bones: list              # (name, parent-name or None) in file order
    rest_pose: dict          # bone -> Transform, world frame
    frames: list             # per frame: bone -> Transform
    fps: float
    contacts: dict | None = None  # foot bone -> bool array, len = n_frames

    def __post_init__(self):
        if self.fps <= 0:
            raise MotionError(f"fps must be positive, got {self.fps}")
        if not self.frames:
            raise MotionError("motion has no frames")
        names = [b[0] for b in self.bones]
        if len(set(names)) != len(names):
            raise MotionError("duplicate bone names")
        self.bone_index = {n: i for i, n in enumerate(names)}
        roots = [n for n, p in self.bones if p is None]
        if len(roots) != 1:
            raise MotionError(f"skeleton must have exactly one root, got {roots}")
        self.root_bone = roots[0]
        self.children = {n: [] for n in names}
        for n, p in self.bones:
            if p is None:
                continue
            if p not in self.bone_index:
                raise MotionError(f"bone {n!r} has unknown parent {p!r}")
            self.children[p].append(n)
        # reachability from the root == tree (single parent is structural)
        seen = set()
        stack = [self.root_bone]
        while stack:
            b = stack.pop()
            if b in seen:
                raise MotionError(f"bone graph has a cycle through {b!r}")
            seen.add(b)
            stack.extend(self.children[b])
        if seen != set(names):
            raise MotionError(f"bones disconnected from root: {sorted(set(names) - seen)}")
        missing = [n for n in names if n not in self.rest_pose]
        if missing:
            raise MotionError(f"rest pose missing bones: {missing}")
        for k, frame in enumerate(self.frames):
            for n in names:
                if n not in frame:
                    raise MotionError(f"frame {k} missing bone {n!r}")
        if self.contacts is not None:
            for foot, seq in self.contacts.items():
                if foot not in self.bone_index:
                    raise MotionError(f"contact label for unknown bone {foot!r}")
                if len(seq) != len(self.frames):
                    raise MotionError(
                        f"contact sequence for {foot!r} has length {len(seq)}, "
                        f"expected {len(self.frames)}")

    @property
    def n_frames(self):
        return len(self.frames)

    @property
    def duration(self):
        return (self.n_frames - 1) / self.fps

    def bone_positions(self, bone):
        return np.array([f[bone].trans for f in self.frames])

    def topo_order(self):
        order = []
        stack = [self.root_bone]
        while stack:
            b = stack.pop()
            order.append(b)
            stack.extend(reversed(self.children[b]))
        return order


@dataclass
class ContactSchedule:
    """Per-foot stance labels plus their rising-edge (first contact) indices."""

    contacts: dict                     # foot -> bool array
    first_contacts: dict = field(init=False)
    n_frames: int = field(init=False)

    def __post_init__(self):
        lengths = {len(v) for v in self.contacts.values()}
        if len(lengths) != 1:
            raise MotionError("contact sequences have mismatched lengths")
        self.n_frames = lengths.pop()
        self.contacts = {f: np.asarray(v, dtype=bool)
                         for f, v in self.contacts.items()}
        self.first_contacts = {f: _rising_edges(v)
                               for f, v in self.contacts.items()}

    @property
    def feet(self):
        return list(self.contacts)

    def in_contact(self, foot, k):
        return bool(self.contacts[foot][k])

    def stance_pairs(self, foot):
        """(k, k+1) index pairs where the foot stays in contact."""
        c = self.contacts[foot]
        return [(k, k + 1) for k in range(len(c) - 1) if c[k] and c[k + 1]]

    def select(self, indices):
        """Schedule restricted/reordered to the given frame indices."""
        return ContactSchedule({f: c[indices] for f, c in self.contacts.items()})


def _rising_edges(c):
    c = np.asarray(c, dtype=bool)
    prev = np.concatenate([[False], c[:-1]])
    return list(np.where(c & ~prev)[0])


def _parse_pose(entry, where):
    try:
        pos = np.asarray(entry["pos"], dtype=float)
        quat = np.asarray(entry["quat"], dtype=float)
    except (KeyError, TypeError, ValueError) as e:
        raise MotionError(f"{where}: malformed pose entry ({e})") from None
    if pos.shape != (3,) or quat.shape != (4,):
        raise MotionError(f"{where}: pose must have pos[3] and quat[4]")
    norm = np.linalg.norm(quat)
    if abs(norm - 1.0) > QUAT_NORM_TOL:
        raise MotionError(f"{where}: quaternion norm {norm:.6f} off unit "
                          f"by more than {QUAT_NORM_TOL}")
    return Transform(quat_normalize(quat), pos)


def load_motion(text) -> SkeletonMotion:
    """Parse and validate the motion JSON schema."""
    if hasattr(text, "read"):
        text = text.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise MotionError(f"invalid JSON: {e}") from None
    for key in ("fps", "bones", "rest_pose", "frames"):
        if key not in data:
            raise MotionError(f"missing required section {key!r}")
    bones = []
    for b in data["bones"]:
        if "name" not in b:
            raise MotionError("bone entry without name")
        bones.append((b["name"], b.get("parent")))
    names = {n for n, _ in bones}
    rest = {}
    for bone, entry in data["rest_pose"].items():
        if bone not in names:
            raise MotionError(f"rest pose references unknown bone {bone!r}")
        rest[bone] = _parse_pose(entry, f"rest_pose[{bone}]")
    frames = []
    for k, fr in enumerate(data["frames"]):
        frame = {}
        for bone, entry in fr.items():
            if bone not in names:
                raise MotionError(f"frame {k} references unknown bone {bone!r}")
            frame[bone] = _parse_pose(entry, f"frames[{k}][{bone}]")
        frames.append(frame)
    contacts = None
    if data.get("contacts") is not None:
        contacts = {f: np.asarray(v, dtype=bool)
                    for f, v in data["contacts"].items()}
    return SkeletonMotion(bones, rest, frames, float(data["fps"]), contacts)


def save_motion(motion: SkeletonMotion) -> str:
    """Serialize back to the canonical JSON schema (deterministic)."""
    def pose(xf):
        return {"pos": [float(x) for x in xf.trans],
                "quat": [float(x) for x in xf.rot]}

    doc = {
        "fps": float(motion.fps),
        "bones": [{"name": n, "parent": p} for n, p in motion.bones],
        "rest_pose": {n: pose(motion.rest_pose[n])
                      for n, _ in motion.bones},
        "frames": [{n: pose(fr[n]) for n, _ in motion.bones}
                   for fr in motion.frames],
    }
    if motion.contacts is not None:
        doc["contacts"] = {f: [bool(x) for x in v]
                           for f, v in motion.contacts.items()}
    return json.dumps(doc, indent=1) + "\n"


def derive_contacts(motion: SkeletonMotion, foot_bones, h_thresh=0.05,
                    v_thresh=0.2) -> ContactSchedule:
    """Threshold foot height and finite-difference speed, then apply a
    3-frame majority filter. Defaults tolerate typical mocap jitter."""
    if motion.n_frames < 2:
        raise MotionError("need at least 2 frames to differentiate")
    out = {}
    for foot in foot_bones:
        if foot not in motion.bone_index:
            raise MotionError(f"unknown foot bone {foot!r}")
        p = motion.bone_positions(foot)
        speed = np.empty(len(p))
        speed[1:-1] = np.linalg.norm(p[2:] - p[:-2], axis=1) * motion.fps / 2
        speed[0] = np.linalg.norm(p[1] - p[0]) * motion.fps
        speed[-1] = np.linalg.norm(p[-1] - p[-2]) * motion.fps
        raw = (p[:, 2] < h_thresh) & (speed < v_thresh)
        padded = np.concatenate([[raw[0]], raw, [raw[-1]]])
        filt = np.array([
            padded[k:k + 3].sum() >= 2 for k in range(len(raw))
        ])
        out[foot] = filt
    return ContactSchedule(out)


_MIRROR_TOKENS = [
    ("left", "right"), ("Left", "Right"), ("LEFT", "RIGHT"),
    ("l_", "r_"), ("_l", "_r"), ("L_", "R_"), ("_L", "_R"),
]


def mirror_pairs(names):
    """Heuristic left/right bone pairing by name token replacement."""
    pairs = []
    names = list(names)
    nameset = set(names)
    for n in names:
        for lt, rt in _MIRROR_TOKENS:
            if lt in n:
                cand = n.replace(lt, rt)
                if cand != n and cand in nameset:
                    pairs.append((n, cand))
                    break
    return pairs


@dataclass
class RestPoseDiagnostics:
    symmetry_residual: float      # max mirrored-pair mismatch, meters
    pair_residuals: dict
    upright_angle: float          # torso axis vs +z, radians
    passed: bool
    messages: list


def validate_rest_pose(motion: SkeletonMotion,
                       symmetry_tol=0.02) -> RestPoseDiagnostics:
    """Check left/right symmetry about the sagittal plane (x-z through the
    root) and report torso uprightness. Arm configuration is unconstrained:
    a symmetric A-pose and T-pose both pass."""
    rest = motion.rest_pose
    root_y = rest[motion.root_bone].trans[1]
    pairs = mirror_pairs([n for n, _ in motion.bones])
    residuals = {}
    messages = []
    worst = 0.0
    for left, right in pairs:
        pl = rest[left].trans.copy()
        pl[1] = 2 * root_y - pl[1]  # mirror about the sagittal plane
        r = float(np.linalg.norm(pl - rest[right].trans))
        residuals[(left, right)] = r
        worst = max(worst, r)
    if not pairs:
        messages.append("no left/right bone pairs recognized")

    central = [n for n, _ in motion.bones
               if not any(n in p for p in pairs)]
    upright = 0.0
    if central:
        zs = [(rest[n].trans[2], n) for n in central]
        lo, hi = min(zs), max(zs)
        axis = rest[hi[1]].trans - rest[lo[1]].trans
        nrm = np.linalg.norm(axis)
        if nrm > 1e-9:
            upright = float(np.arccos(np.clip(axis[2] / nrm, -1.0, 1.0)))
            if upright > np.radians(25):
                messages.append(f"torso tilted {np.degrees(upright):.1f} deg from vertical")
    passed = worst <= symmetry_tol
    if not passed:
        messages.append(f"symmetry residual {worst * 100:.2f} cm exceeds "
                        f"{symmetry_tol * 100:.1f} cm")
    return RestPoseDiagnostics(worst, residuals, upright, passed, messages)

"""Kinematic tree model, URDF-subset parser/writer, keyframe registry.

The floating base is implicit: the root link is the one that never appears
as a joint child, and generalized coordinates are laid out as

    q = [base position (3); base quaternion w,x,y,z (4); joint values]
    v = [base linear velocity, world frame (3);
         base angular velocity, base frame (3); joint rates]

Joint values follow depth-first tree order (children in declaration order).
Spherical joints carry three values (intrinsic X-Y-Z euler) and are written
to URDF as three chained revolute joints with zero-length, zero-mass
intermediate links, since URDF has no spherical joint type.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from xml.parsers import expat

import numpy as np

from .core_math import (
    Transform, mat_from_rpy, rpy_from_mat, quat_from_mat, quat_mul, quat_rotate,
    quat_conj, so3_exp, so3_log,
)

JOINT_KINDS = ("floating", "revolute", "spherical", "fixed")
_QDIM = {"revolute": 1, "spherical": 3, "fixed": 0}


class UrdfError(ValueError):
    """Base for URDF parse/validation failures; carries line/column."""

    def __init__(self, msg, line=None, column=None):
        loc = f" (line {line}, col {column})" if line is not None else ""
        super().__init__(msg + loc)
        self.line = line
        self.column = column


class UrdfSyntaxError(UrdfError):
    pass


class DuplicateNameError(UrdfError):
    pass


class MissingLinkError(UrdfError):
    pass


class CyclicGraphError(UrdfError):
    pass


class MalformedNumberError(UrdfError):
    pass


class UnsupportedJointError(UrdfError):
    pass


class ModelError(ValueError):
    """Model-level invariant violation (outside of document parsing)."""


@dataclass
class LinkSpec:
    """Rigid body: mass (kg), CoM (m, link frame), inertia about CoM (kg m^2)."""

    name: str
    mass: float = 0.0
    com: np.ndarray = field(default_factory=lambda: np.zeros(3))
    inertia: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        self.com = np.asarray(self.com, dtype=float)
        self.inertia = np.asarray(self.inertia, dtype=float)
        if self.mass < 0:
            raise ModelError(f"link {self.name}: negative mass")
        if np.abs(self.inertia - self.inertia.T).max() > 1e-12:
            raise ModelError(f"link {self.name}: inertia not symmetric")
        if self.mass > 0:
            ev = np.linalg.eigvalsh(self.inertia)
            if ev[0] < -1e-12:
                raise ModelError(f"link {self.name}: inertia not PSD")
            # triangle inequality on principal moments
            if ev[0] + ev[1] < ev[2] - 1e-9 * max(1.0, ev[2]):
                raise ModelError(f"link {self.name}: principal moments violate "
                                 "triangle inequality")


@dataclass
class JointSpec:
    """Tree edge. Limits are per-dof arrays (1 for revolute, 3 for spherical)."""

    name: str
    kind: str
    parent: str
    child: str
    origin: Transform = field(default_factory=Transform.identity)
    axis: np.ndarray | None = None
    q_min: np.ndarray | None = None
    q_max: np.ndarray | None = None
    v_max: np.ndarray | None = None
    tau_max: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in JOINT_KINDS:
            raise ModelError(f"joint {self.name}: unknown kind {self.kind!r}")
        dof = _QDIM.get(self.kind, 0)
        if self.kind == "revolute":
            if self.axis is None:
                raise ModelError(f"joint {self.name}: revolute joint needs an axis")
            self.axis = np.asarray(self.axis, dtype=float)
            n = np.linalg.norm(self.axis)
            if abs(n - 1.0) > 1e-9:
                if n == 0:
                    raise ModelError(f"joint {self.name}: zero axis")
                self.axis = self.axis / n
        def _fill(val, default):
            if val is None:
                return np.full(dof, default)
            arr = np.atleast_1d(np.asarray(val, dtype=float))
            if arr.shape != (dof,):
                raise ModelError(f"joint {self.name}: limit shape {arr.shape} "
                                 f"!= ({dof},)")
            return arr
        self.q_min = _fill(self.q_min, -np.inf)
        self.q_max = _fill(self.q_max, np.inf)
        self.v_max = _fill(self.v_max, np.inf)
        self.tau_max = _fill(self.tau_max, np.inf)
        if np.any(self.q_min > self.q_max):
            raise ModelError(f"joint {self.name}: q_min > q_max")
        if np.any(self.v_max <= 0):
            raise ModelError(f"joint {self.name}: v_max must be positive")

    @property
    def dof(self):
        return _QDIM[self.kind]


class RobotModel:
    """Immutable kinematic tree with named keyframes.

    ``joints`` excludes the implicit floating root joint; they are stored in
    depth-first traversal order, which also fixes the q/v layout.
    """

    def __init__(self, links, joints, keyframes=None, name="robot"):
        self.name = name
        self.links = list(links)
        self.link_index = {}
        for i, l in enumerate(self.links):
            if l.name in self.link_index:
                raise DuplicateNameError(f"duplicate link name {l.name!r}")
            self.link_index[l.name] = i

        seen = set()
        child_of = {}
        children = {l.name: [] for l in self.links}
        for j in joints:
            if j.kind == "floating":
                raise ModelError("floating joints are implicit; do not declare one")
            if j.name in seen:
                raise DuplicateNameError(f"duplicate joint name {j.name!r}")
            seen.add(j.name)
            if j.parent not in self.link_index:
                raise MissingLinkError(f"joint {j.name}: unknown parent {j.parent!r}")
            if j.child not in self.link_index:
                raise MissingLinkError(f"joint {j.name}: unknown child {j.child!r}")
            if j.child in child_of:
                raise CyclicGraphError(f"link {j.child!r} has two parent joints")
            child_of[j.child] = j
            children[j.parent].append(j)

        roots = [l.name for l in self.links if l.name not in child_of]
        if not roots:
            raise CyclicGraphError("joint graph has no root link (cycle)")
        if len(roots) > 1:
            raise ModelError(f"model must have exactly one root link, got {roots}")
        self.root_link = roots[0]

        # depth-first pre-order traversal (children in declaration order)
        # fixes joint order and detects disconnection
        ordered = []
        visited = {self.root_link}
        stack = list(reversed(children[self.root_link]))
        while stack:
            j = stack.pop()
            ordered.append(j)
            if j.child in visited:
                raise CyclicGraphError(f"cycle through link {j.child!r}")
            visited.add(j.child)
            stack.extend(reversed(children[j.child]))
        if len(visited) != len(self.links):
            missing = sorted(set(self.link_index) - visited)
            raise CyclicGraphError(f"links disconnected from root: {missing}")
        self.joints = ordered
        self.joint_index = {j.name: i for i, j in enumerate(self.joints)}

        self.nq = 7
        self.nv = 6
        self._joint_q_offset = {}
        for j in self.joints:
            self._joint_q_offset[j.name] = self.nq
            self.nq += j.dof
            self.nv += j.dof

        self.keyframes = {}
        for kf_name, (link, xf) in (keyframes or {}).items():
            self.add_keyframe(kf_name, link, xf)

        self.parent_joint = child_of  # child link name -> JointSpec
        self._children = children

    # -- structure ---------------------------------------------------------

    def add_keyframe(self, name, link, xf: Transform):
        if link not in self.link_index:
            raise MissingLinkError(f"keyframe {name!r}: unknown link {link!r}")
        self.keyframes[name] = (link, xf)

    def joint_q_slice(self, name):
        j = self.joints[self.joint_index[name]]
        off = self._joint_q_offset[name]
        return slice(off, off + j.dof)

    def joint_v_slice(self, name):
        s = self.joint_q_slice(name)
        return slice(s.start - 1, s.stop - 1)

    def joint_limit_arrays(self):
        """(q_lo, q_hi, v_max, tau_max) stacked over joint dofs (length nv-6)."""
        if self.nv == 6:
            z = np.zeros(0)
            return z, z, z, z
        q_lo = np.concatenate([j.q_min for j in self.joints if j.dof])
        q_hi = np.concatenate([j.q_max for j in self.joints if j.dof])
        v_mx = np.concatenate([j.v_max for j in self.joints if j.dof])
        t_mx = np.concatenate([j.tau_max for j in self.joints if j.dof])
        return q_lo, q_hi, v_mx, t_mx

    def neutral_q(self):
        q = np.zeros(self.nq)
        q[3] = 1.0
        return q

    def check_q(self, q):
        q = np.asarray(q, dtype=float)
        if q.shape != (self.nq,):
            raise ModelError(f"q has shape {q.shape}, expected ({self.nq},)")
        n = np.linalg.norm(q[3:7])
        if abs(n - 1.0) > 1e-9:
            raise ModelError(f"base quaternion norm {n!r} != 1")
        return q

    def structurally_equal(self, other, tol=1e-12):
        if [l.name for l in self.links] != [l.name for l in other.links]:
            return False
        for a, b in zip(self.links, other.links):
            if abs(a.mass - b.mass) > tol:
                return False
            if np.abs(a.com - b.com).max() > tol:
                return False
            if np.abs(a.inertia - b.inertia).max() > tol:
                return False
        if [j.name for j in self.joints] != [j.name for j in other.joints]:
            return False
        for a, b in zip(self.joints, other.joints):
            if (a.kind, a.parent, a.child) != (b.kind, b.parent, b.child):
                return False
            if not a.origin.almost_equal(b.origin, tol):
                return False
            if a.kind == "revolute" and np.abs(a.axis - b.axis).max() > tol:
                return False
            for x, y in ((a.q_min, b.q_min), (a.q_max, b.q_max),
                         (a.v_max, b.v_max), (a.tau_max, b.tau_max)):
                both_inf = np.isinf(x) & np.isinf(y) & (np.sign(x) == np.sign(y))
                if not np.all(both_inf | (np.abs(x - y) <= tol)):
                    return False
        return True

    # -- manifold increments -------------------------------------------------

    def boxplus(self, q, dq):
        """q (+) dq: world-frame translation step, base-frame rotation step,
        plain addition on joint values. dq has length nv."""
        q = self.check_q(q)
        dq = np.asarray(dq, dtype=float)
        if dq.shape != (self.nv,):
            raise ModelError(f"increment has shape {dq.shape}, expected ({self.nv},)")
        out = np.empty(self.nq)
        out[0:3] = q[0:3] + dq[0:3]
        out[3:7] = quat_mul(q[3:7], so3_exp(dq[3:6]))
        if out[3] < 0:
            out[3:7] = -out[3:7]
        out[7:] = q[7:] + dq[6:]
        return out

    def boxminus(self, q1, q0):
        """Inverse of boxplus: boxplus(q0, boxminus(q1, q0)) == q1."""
        q1 = self.check_q(q1)
        q0 = self.check_q(q0)
        dq = np.empty(self.nv)
        dq[0:3] = q1[0:3] - q0[0:3]
        dq[3:6] = so3_log(quat_mul(quat_conj(q0[3:7]), q1[3:7]))
        dq[6:] = q1[7:] - q0[7:]
        return dq


# -- URDF parsing ------------------------------------------------------------

_SUPPORTED_ELEMENTS = {
    "robot", "link", "joint", "origin", "axis", "limit", "parent", "child",
    "inertial", "mass", "inertia",
}
_IGNORED_ELEMENTS = {"visual", "collision", "material", "geometry", "mesh",
                     "box", "cylinder", "sphere", "color", "texture"}


class _Node:
    __slots__ = ("tag", "attrib", "children", "line", "column")

    def __init__(self, tag, attrib, line, column):
        self.tag = tag
        self.attrib = attrib
        self.children = []
        self.line = line
        self.column = column

    def find(self, tag):
        for c in self.children:
            if c.tag == tag:
                return c
        return None

    def findall(self, tag):
        return [c for c in self.children if c.tag == tag]


def _parse_xml(text):
    parser = expat.ParserCreate()
    root = []
    stack = []

    def start(tag, attrs):
        node = _Node(tag, attrs, parser.CurrentLineNumber,
                     parser.CurrentColumnNumber)
        if stack:
            stack[-1].children.append(node)
        else:
            root.append(node)
        stack.append(node)

    def end(tag):
        stack.pop()

    parser.StartElementHandler = start
    parser.EndElementHandler = end
    try:
        parser.Parse(text, True)
    except expat.ExpatError as e:
        raise UrdfSyntaxError(f"malformed XML: {expat.errors.messages[e.code]}",
                              e.lineno, e.offset) from None
    if not root:
        raise UrdfSyntaxError("empty document")
    return root[0]


def _floats(node, attr, n, default=None):
    raw = node.attrib.get(attr)
    if raw is None:
        if default is not None:
            return np.asarray(default, dtype=float)
        raise MalformedNumberError(f"<{node.tag}> missing attribute {attr!r}",
                                   node.line, node.column)
    parts = raw.split()
    try:
        vals = np.array([float(p) for p in parts])
    except ValueError:
        raise MalformedNumberError(
            f"<{node.tag} {attr}={raw!r}>: not a number", node.line,
            node.column) from None
    if vals.shape != (n,):
        raise MalformedNumberError(
            f"<{node.tag} {attr}={raw!r}>: expected {n} values", node.line,
            node.column)
    return vals


def _float1(node, attr, default=None):
    if attr not in node.attrib and default is not None:
        return float(default)
    return float(_floats(node, attr, 1)[0])


def _origin_from_node(node):
    if node is None:
        return Transform.identity()
    xyz = _floats(node, "xyz", 3, default=(0.0, 0.0, 0.0))
    rpy = _floats(node, "rpy", 3, default=(0.0, 0.0, 0.0))
    return Transform(quat_from_mat(mat_from_rpy(rpy)), xyz)


def parse_urdf(text, name=None):
    """Parse the supported URDF subset into a RobotModel.

    Returns (model, warnings); warnings list the skipped element tags.
    Unsupported joint types, duplicate names, dangling parent/child refs,
    cycles, and malformed numbers raise distinct UrdfError subclasses with
    line/column information.
    """
    if isinstance(text, (bytes, io.IOBase)):
        text = text.read() if hasattr(text, "read") else text.decode()
    root = _parse_xml(text)
    if root.tag != "robot":
        raise UrdfSyntaxError(f"root element is <{root.tag}>, expected <robot>",
                              root.line, root.column)
    warnings = []
    links = []
    joints = []
    for node in root.children:
        if node.tag == "link":
            lname = node.attrib.get("name")
            if not lname:
                raise UrdfSyntaxError("<link> without name", node.line, node.column)
            mass = 0.0
            com = np.zeros(3)
            inertia = np.zeros((3, 3))
            inertial = node.find("inertial")
            if inertial is not None:
                m_node = inertial.find("mass")
                if m_node is not None:
                    mass = _float1(m_node, "value")
                com = _origin_from_node(inertial.find("origin")).trans
                i_node = inertial.find("inertia")
                if i_node is not None:
                    ixx = _float1(i_node, "ixx", 0.0)
                    iyy = _float1(i_node, "iyy", 0.0)
                    izz = _float1(i_node, "izz", 0.0)
                    ixy = _float1(i_node, "ixy", 0.0)
                    ixz = _float1(i_node, "ixz", 0.0)
                    iyz = _float1(i_node, "iyz", 0.0)
                    inertia = np.array([[ixx, ixy, ixz],
                                        [ixy, iyy, iyz],
                                        [ixz, iyz, izz]])
            for sub in node.children:
                if sub.tag in _IGNORED_ELEMENTS:
                    warnings.append(f"link {lname}: skipped <{sub.tag}>")
            try:
                links.append(LinkSpec(lname, mass, com, inertia))
            except ModelError as e:
                raise UrdfError(str(e), node.line, node.column) from None
        elif node.tag == "joint":
            jname = node.attrib.get("name")
            if not jname:
                raise UrdfSyntaxError("<joint> without name", node.line, node.column)
            kind = node.attrib.get("type", "")
            if kind not in ("revolute", "fixed"):
                raise UnsupportedJointError(
                    f"joint {jname!r}: unsupported type {kind!r}",
                    node.line, node.column)
            parent = node.find("parent")
            child = node.find("child")
            if parent is None or "link" not in parent.attrib:
                raise MissingLinkError(f"joint {jname!r}: missing <parent>",
                                       node.line, node.column)
            if child is None or "link" not in child.attrib:
                raise MissingLinkError(f"joint {jname!r}: missing <child>",
                                       node.line, node.column)
            origin = _origin_from_node(node.find("origin"))
            axis = None
            limits = {}
            if kind == "revolute":
                axis_node = node.find("axis")
                axis = (_floats(axis_node, "xyz", 3)
                        if axis_node is not None else np.array([1.0, 0, 0]))
                limit_node = node.find("limit")
                if limit_node is not None:
                    limits = {
                        "q_min": _float1(limit_node, "lower", -np.inf),
                        "q_max": _float1(limit_node, "upper", np.inf),
                        "v_max": _float1(limit_node, "velocity", np.inf),
                        "tau_max": _float1(limit_node, "effort", np.inf),
                    }
            try:
                joints.append(JointSpec(
                    jname, kind, parent.attrib["link"], child.attrib["link"],
                    origin=origin, axis=axis, **limits))
            except ModelError as e:
                raise UrdfError(str(e), node.line, node.column) from None
        else:
            warnings.append(f"skipped <{node.tag}>")
    try:
        model = RobotModel(links, joints, name=name or root.attrib.get("name", "robot"))
    except UrdfError:
        raise
    except ModelError as e:
        raise UrdfError(str(e)) from None
    return model, warnings


# -- URDF writing -------------------------------------------------------------

def _fmt(x):
    # repr of a float is the shortest decimal that round-trips exactly
    return repr(float(x))


def _fmt3(v):
    return " ".join(_fmt(x) for x in v)


def _write_origin(out, xf: Transform, indent):
    rpy = rpy_from_mat(xf.rotmat)
    out.write(f'{indent}<origin xyz="{_fmt3(xf.trans)}" rpy="{_fmt3(rpy)}"/>\n')


def _write_link(out, link: LinkSpec):
    if link.mass > 0 or np.abs(link.inertia).max() > 0:
        out.write(f'  <link name="{link.name}">\n    <inertial>\n')
        out.write(f'      <origin xyz="{_fmt3(link.com)}" rpy="0.0 0.0 0.0"/>\n')
        out.write(f'      <mass value="{_fmt(link.mass)}"/>\n')
        I = link.inertia
        out.write(f'      <inertia ixx="{_fmt(I[0, 0])}" ixy="{_fmt(I[0, 1])}" '
                  f'ixz="{_fmt(I[0, 2])}" iyy="{_fmt(I[1, 1])}" '
                  f'iyz="{_fmt(I[1, 2])}" izz="{_fmt(I[2, 2])}"/>\n')
        out.write('    </inertial>\n  </link>\n')
    else:
        out.write(f'  <link name="{link.name}"/>\n')


def _write_revolute(out, name, parent, child, origin, axis, q_min, q_max,
                    v_max, tau_max):
    out.write(f'  <joint name="{name}" type="revolute">\n')
    _write_origin(out, origin, "    ")
    out.write(f'    <parent link="{parent}"/>\n')
    out.write(f'    <child link="{child}"/>\n')
    out.write(f'    <axis xyz="{_fmt3(axis)}"/>\n')
    attrs = []
    if np.isfinite(q_min):
        attrs.append(f'lower="{_fmt(q_min)}"')
    if np.isfinite(q_max):
        attrs.append(f'upper="{_fmt(q_max)}"')
    if np.isfinite(v_max):
        attrs.append(f'velocity="{_fmt(v_max)}"')
    if np.isfinite(tau_max):
        attrs.append(f'effort="{_fmt(tau_max)}"')
    if attrs:
        out.write(f'    <limit {" ".join(attrs)}/>\n')
    out.write('  </joint>\n')


_SPH_AXES = (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0]))
_SPH_SUFFIX = ("_x", "_y", "_z")


def write_urdf(model: RobotModel):
    """Serialize to a deterministic URDF document.

    Spherical joints become three chained revolute joints (suffixes _x,_y,_z)
    with zero-mass intermediate links, so the output is standard URDF; the
    document is byte-stable across runs (model order, shortest round-trip
    float format).
    """
    out = io.StringIO()
    out.write(f'<robot name="{model.name}">\n')
    extra_links = []
    joint_lines = io.StringIO()
    for j in model.joints:
        if j.kind == "revolute":
            _write_revolute(joint_lines, j.name, j.parent, j.child, j.origin,
                            j.axis, j.q_min[0], j.q_max[0], j.v_max[0],
                            j.tau_max[0])
        elif j.kind == "fixed":
            joint_lines.write(f'  <joint name="{j.name}" type="fixed">\n')
            _write_origin(joint_lines, j.origin, "    ")
            joint_lines.write(f'    <parent link="{j.parent}"/>\n')
            joint_lines.write(f'    <child link="{j.child}"/>\n')
            joint_lines.write('  </joint>\n')
        elif j.kind == "spherical":
            chain = [j.parent,
                     f"{j.child}__{j.name}_x", f"{j.child}__{j.name}_y",
                     j.child]
            extra_links.extend(chain[1:3])
            for i in range(3):
                origin = j.origin if i == 0 else Transform.identity()
                _write_revolute(joint_lines, j.name + _SPH_SUFFIX[i], chain[i],
                                chain[i + 1], origin, _SPH_AXES[i],
                                j.q_min[i], j.q_max[i], j.v_max[i],
                                j.tau_max[i])
    for link in model.links:
        _write_link(out, link)
    for name in extra_links:
        out.write(f'  <link name="{name}"/>\n')
    out.write(joint_lines.getvalue())
    out.write('</robot>\n')
    return out.getvalue()


# -- keyframe sidecar ---------------------------------------------------------

def load_keyframes(text):
    """Sidecar JSON { name: {link, xyz, rpy} } -> dict name -> (link, Transform)."""
    data = json.loads(text)
    out = {}
    for name, entry in data.items():
        xyz = np.asarray(entry.get("xyz", [0.0, 0.0, 0.0]), dtype=float)
        rpy = np.asarray(entry.get("rpy", [0.0, 0.0, 0.0]), dtype=float)
        out[name] = (entry["link"], Transform(quat_from_mat(mat_from_rpy(rpy)), xyz))
    return out


def save_keyframes(keyframes):
    data = {}
    for name in sorted(keyframes):
        link, xf = keyframes[name]
        data[name] = {
            "link": link,
            "xyz": [float(x) for x in xf.trans],
            "rpy": [float(x) for x in rpy_from_mat(xf.rotmat)],
        }
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def attach_keyframes(model: RobotModel, keyframes):
    for name, (link, xf) in keyframes.items():
        model.add_keyframe(name, link, xf)
    return model

"""Miniature differentiable 2D ray-tracing twin.

World model: a polygonal scene of wall segments in the plane, one
transmitter, receivers anywhere. Propagation paths are specular
reflections found by the image method up to order 3, with occlusion
tests against every wall. Per-path amplitude is ``1/length`` (2D
free-space spreading) times the product of the reflection coefficients
of the bounced materials, so the complex channel response is polynomial
in the material vector and its gradient is exact.

Conventions:

* speed of light ``C = 299_792_458`` m/s; delays are ``length / C``;
* angles wrapped to (-pi, pi]; departure angle is the bearing of the
  first leg out of the transmitter, arrival angle the bearing from the
  receiver back toward the last interaction point;
* subcarriers are uniformly spaced at ``bandwidth / n`` and centered on
  the carrier;
* occlusion ties are conservative: a leg that exactly grazes a wall
  endpoint counts as blocked;
* wall normals point to the right of the segment direction (first
  endpoint toward second, rotated -90 degrees).
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import kernels

SPEED_OF_LIGHT = 299_792_458.0

_GEOM_EPS = 1e-9         # meters: point-on-segment / coincidence tests
_PARAM_SLACK = 1e-12     # parametric: conservative outward slop
_CONTACT_EPS = 1e-9      # parametric: reflection-contact exclusion zone
_MAX_SUPPORTED_ORDER = 3


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a), 2.0 * np.pi)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    """2D environment: wall segments, per-wall material index, tx, rx grid."""

    walls: np.ndarray                 # (W, 2, 2) segment endpoints, meters
    wall_materials: np.ndarray        # (W,) int index into the material vector
    tx: np.ndarray                    # (2,)
    carrier_frequency: float          # Hz
    rx_grid: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        self.walls = np.asarray(self.walls, dtype=np.float64).reshape(-1, 2, 2)
        self.wall_materials = np.asarray(self.wall_materials, dtype=np.int64).reshape(-1)
        self.tx = np.asarray(self.tx, dtype=np.float64).reshape(2)
        self.rx_grid = np.asarray(self.rx_grid, dtype=np.float64).reshape(-1, 2)
        if self.wall_materials.shape[0] != self.walls.shape[0]:
            raise ValueError("one material index per wall required")
        if np.any(self.wall_materials < 0):
            raise ValueError("material indices must be non-negative")
        lengths = np.linalg.norm(self.walls[:, 1] - self.walls[:, 0], axis=1)
        if np.any(lengths < _GEOM_EPS):
            raise ValueError("zero-length wall segment")
        if not self.carrier_frequency > 0:
            raise ValueError("carrier frequency must be positive")

    @property
    def wavelength(self):
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def n_materials(self):
        if self.wall_materials.size == 0:
            return 0
        return int(self.wall_materials.max()) + 1


@dataclass
class PathSolution:
    """One specular path from tx to an rx point."""

    interaction_walls: tuple          # wall indices in bounce order; () = LoS
    points: np.ndarray                # (order+2, 2): tx, bounce points, rx
    length: float                     # meters
    delay: float                      # seconds, length / c
    aod: float                        # radians, (-pi, pi]
    aoa: float                        # radians, (-pi, pi]
    base_gain: float                  # 1 / length
    reflection_counts: np.ndarray     # (n_materials,) bounces per material

    @property
    def order(self):
        return len(self.interaction_walls)


@dataclass
class ChannelResponse:
    """Complex frequency response sampled on a uniform subcarrier grid."""

    frequencies: np.ndarray           # (K,) Hz, strictly increasing, uniform
    values: np.ndarray                # (K,) complex
    bandwidth: float                  # Hz

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=np.float64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.complex128).reshape(-1)
        if self.values.shape != self.frequencies.shape:
            raise ValueError("values and frequencies must have equal length")
        if self.frequencies.size > 1:
            df = np.diff(self.frequencies)
            if np.any(df <= 0):
                raise ValueError("subcarrier frequencies must be strictly increasing")
            if not np.allclose(df, df[0], rtol=1e-9, atol=0.0):
                raise ValueError("subcarrier frequencies must be uniformly spaced")


# ---------------------------------------------------------------------------
# Geometry primitives
# ---------------------------------------------------------------------------

def _mirror(p, a, b):
    d = b - a
    t = np.dot(p - a, d) / np.dot(d, d)
    foot = a + t * d
    return 2.0 * foot - p


def _cross(u, v):
    return u[0] * v[1] - u[1] * v[0]


def _point_on_segment(p, a, b, eps=_GEOM_EPS):
    d = b - a
    seg_len2 = np.dot(d, d)
    t = np.clip(np.dot(p - a, d) / seg_len2, 0.0, 1.0)
    return np.linalg.norm(a + t * d - p) < eps


def _intersect_params(p, q, a, b):
    """Parameters (t, s) with p + t (q - p) = a + s (b - a), or None if parallel."""
    d1 = q - p
    d2 = b - a
    denom = _cross(d1, d2)
    scale = np.linalg.norm(d1) * np.linalg.norm(d2)
    if abs(denom) <= 1e-14 * max(scale, 1e-300):
        return None
    w = a - p
    t = _cross(w, d2) / denom
    s = _cross(w, d1) / denom
    return t, s


def _collinear_overlap(p, q, a, b):
    """True when segment a-b is collinear with p-q and the spans overlap."""
    d1 = q - p
    n1 = np.linalg.norm(d1)
    if abs(_cross(d1, a - p)) > _GEOM_EPS * n1 or abs(_cross(d1, b - p)) > _GEOM_EPS * n1:
        return False
    ta = np.dot(a - p, d1) / np.dot(d1, d1)
    tb = np.dot(b - p, d1) / np.dot(d1, d1)
    lo, hi = min(ta, tb), max(ta, tb)
    return hi >= -_PARAM_SLACK and lo <= 1.0 + _PARAM_SLACK


def _leg_blocked(scene, a, b, start_wall, end_wall):
    """Occlusion test for one leg; contacts with its own reflecting walls pass."""
    for w in range(scene.walls.shape[0]):
        wa, wb = scene.walls[w, 0], scene.walls[w, 1]
        params = _intersect_params(a, b, wa, wb)
        if params is None:
            if _collinear_overlap(a, b, wa, wb):
                return True
            continue
        t, s = params
        if s < -_PARAM_SLACK or s > 1.0 + _PARAM_SLACK:
            continue
        tmin = _CONTACT_EPS if w == start_wall else -_PARAM_SLACK
        tmax = 1.0 - _CONTACT_EPS if w == end_wall else 1.0 + _PARAM_SLACK
        if tmin <= t <= tmax:
            return True
    return False


def _unfold(scene, seq, rx):
    """Reflection points for a wall sequence via the image method.

    Returns the path points [tx, R_1, .., R_k, rx], or None when the
    sequence admits no geometrically valid specular path.
    """
    images = [scene.tx]
    for w in seq:
        images.append(_mirror(images[-1], scene.walls[w, 0], scene.walls[w, 1]))
    q = rx
    reflections = []
    for j in range(len(seq) - 1, -1, -1):
        w = seq[j]
        wa, wb = scene.walls[w, 0], scene.walls[w, 1]
        params = _intersect_params(images[j + 1], q, wa, wb)
        if params is None:
            return None
        t, s = params
        # crossing strictly between image and target, strictly inside the wall
        if not (_CONTACT_EPS < t < 1.0 - _CONTACT_EPS):
            return None
        if not (_CONTACT_EPS < s < 1.0 - _CONTACT_EPS):
            return None
        r = wa + s * (wb - wa)
        reflections.append(r)
        q = r
    reflections.reverse()
    return [scene.tx] + reflections + [rx]


def _make_path(scene, seq, points):
    pts = np.asarray(points)
    legs = np.diff(pts, axis=0)
    length = float(np.linalg.norm(legs, axis=1).sum())
    counts = np.bincount(scene.wall_materials[list(seq)], minlength=scene.n_materials) \
        if seq else np.zeros(scene.n_materials, dtype=np.int64)
    return PathSolution(
        interaction_walls=tuple(seq),
        points=pts,
        length=length,
        delay=length / SPEED_OF_LIGHT,
        aod=float(wrap_angle(np.arctan2(legs[0, 1], legs[0, 0]))),
        aoa=float(wrap_angle(np.arctan2(-legs[-1, 1], -legs[-1, 0]))),
        base_gain=1.0 / length,
        reflection_counts=counts.astype(np.int64),
    )


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def trace_paths(scene, rx, max_order):
    """All unblocked specular paths of reflection order <= max_order.

    Deterministic ordering: (order, length, wall sequence).
    """
    if max_order < 0:
        raise ValueError("max_order must be non-negative")
    if max_order > _MAX_SUPPORTED_ORDER:
        raise ValueError(f"max_order {max_order} exceeds supported depth {_MAX_SUPPORTED_ORDER}")
    rx = np.asarray(rx, dtype=np.float64).reshape(2)
    if np.linalg.norm(rx - scene.tx) < _GEOM_EPS:
        raise ValueError("rx must be distinct from tx")
    for w in range(scene.walls.shape[0]):
        if _point_on_segment(scene.tx, scene.walls[w, 0], scene.walls[w, 1]):
            raise ValueError(f"degenerate scene: tx lies on wall {w}")

    paths = []
    if not _leg_blocked(scene, scene.tx, rx, None, None):
        paths.append(_make_path(scene, (), [scene.tx, rx]))

    n_walls = scene.walls.shape[0]
    for order in range(1, max_order + 1):
        for seq in itertools.product(range(n_walls), repeat=order):
            if any(seq[i] == seq[i + 1] for i in range(order - 1)):
                continue
            pts = _unfold(scene, seq, rx)
            if pts is None:
                continue
            k = len(seq)
            blocked = False
            for i in range(k + 1):
                start_wall = seq[i - 1] if i >= 1 else None
                end_wall = seq[i] if i <= k - 1 else None
                if _leg_blocked(scene, pts[i], pts[i + 1], start_wall, end_wall):
                    blocked = True
                    break
            if not blocked:
                paths.append(_make_path(scene, seq, pts))

    paths.sort(key=lambda p: (p.order, p.length, p.interaction_walls))
    return paths


def path_gains(paths, materials):
    """Real amplitude gain per path: base gain times bounced reflection coefficients."""
    materials = _check_materials(materials, paths)
    if not paths:
        return np.zeros(0)
    base = np.array([p.base_gain for p in paths])
    counts = np.array([p.reflection_counts for p in paths], dtype=np.int64)
    if counts.shape[1] == 0:
        return base
    return base * np.prod(materials[None, :] ** counts, axis=1)


def path_gain_gradient(paths, materials):
    """(P, M) Jacobian of path gains in the material vector."""
    materials = _check_materials(materials, paths)
    n_mat = materials.shape[0]
    if not paths:
        return np.zeros((0, n_mat))
    base = np.array([p.base_gain for p in paths])
    counts = np.array([p.reflection_counts for p in paths], dtype=np.int64)
    grad = np.zeros((len(paths), n_mat))
    for m in range(n_mat):
        cm = counts.copy()
        hit = cm[:, m] > 0
        cm[hit, m] -= 1
        grad[:, m] = base * counts[:, m] * np.prod(materials[None, :] ** cm, axis=1)
    return grad


def _check_materials(materials, paths=None):
    materials = np.asarray(materials, dtype=np.float64).reshape(-1)
    if np.any(materials < 0.0) or np.any(materials > 1.0):
        raise ValueError("reflection coefficients must lie in [0, 1]")
    if paths:
        needed = max((int(p.reflection_counts.shape[0]) for p in paths), default=0)
        if materials.shape[0] < needed:
            raise ValueError("material vector shorter than the scene's material count")
    return materials


def subcarrier_frequencies(carrier_frequency, bandwidth, n_subcarriers):
    """Uniform grid at spacing bandwidth/n, centered on the carrier."""
    if n_subcarriers < 1:
        raise ValueError("n_subcarriers must be positive")
    k = np.arange(n_subcarriers, dtype=np.float64)
    return carrier_frequency + (k - (n_subcarriers - 1) / 2.0) * (bandwidth / n_subcarriers)


def synthesize_cfr(paths, materials, n_subcarriers, bandwidth, carrier_frequency,
                   phase_offsets=None):
    """Channel frequency response of a path set.

    Value at subcarrier f: sum_p g_p exp(j phi_p) exp(-2j pi f tau_p).
    An empty path set yields the all-zero response.
    """
    freqs = subcarrier_frequencies(carrier_frequency, bandwidth, n_subcarriers)
    if not paths:
        return ChannelResponse(freqs, np.zeros(n_subcarriers, dtype=np.complex128), bandwidth)
    gains = path_gains(paths, materials)
    delays = np.array([p.delay for p in paths])
    if phase_offsets is None:
        phases = np.zeros(len(paths))
    else:
        phases = np.asarray(phase_offsets, dtype=np.float64).reshape(-1)
        if phases.shape[0] != len(paths):
            raise ValueError("one phase offset per path required")
    values = kernels.cfr_predict(delays[None, :], gains[None, :], phases[None, :], freqs)[0]
    return ChannelResponse(freqs, values, bandwidth)


def received_power(cfr):
    """Mean squared magnitude over subcarriers."""
    if cfr.values.size == 0:
        raise ValueError("empty channel response")
    return float(np.mean(np.abs(cfr.values) ** 2))


def material_gradient(scene, rx, materials, measurement, phase_offsets=None, max_order=2):
    """Exact gradient of sum_k |H_meas(f_k) - H_hat(f_k)|^2 in the materials.

    Geometry is fixed, so only the polynomial path gains carry gradient.
    """
    materials = _check_materials(materials)
    paths = trace_paths(scene, rx, max_order)
    if not paths:
        return np.zeros(materials.shape[0])
    gains = path_gains(paths, materials)
    dgains = path_gain_gradient(paths, materials)
    delays = np.array([p.delay for p in paths])
    if phase_offsets is None:
        phases = np.zeros(len(paths))
    else:
        phases = np.asarray(phase_offsets, dtype=np.float64).reshape(-1)
    _, grad = kernels.cfr_objective_grad(
        delays[None, :], gains[None, :], dgains[None, :, :], phases[None, :],
        measurement.frequencies, measurement.values[None, :])
    return grad


def perturb_geometry(scene, wall_index, normal_displacement):
    """Copy of the scene with one wall translated along its normal."""
    if not 0 <= wall_index < scene.walls.shape[0]:
        raise ValueError(f"wall index {wall_index} out of range")
    walls = scene.walls.copy()
    a, b = walls[wall_index]
    d = (b - a) / np.linalg.norm(b - a)
    normal = np.array([d[1], -d[0]])
    walls[wall_index] = walls[wall_index] + normal_displacement * normal[None, :]
    return Scene(walls, scene.wall_materials.copy(), scene.tx.copy(),
                 scene.carrier_frequency, scene.rx_grid.copy())


# ---------------------------------------------------------------------------
# Scene text format
# ---------------------------------------------------------------------------

def parse_scene(text):
    """Parse the line-oriented scene format.

    Records: ``wall x1 y1 x2 y2 material_id``, ``tx x y``, ``rx x y``,
    ``carrier <Hz>``; ``#`` starts a comment.
    """
    walls, materials, rx = [], [], []
    tx = None
    carrier = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        tag, args = tokens[0], tokens[1:]
        try:
            if tag == "wall":
                if len(args) != 5:
                    raise ValueError("expected 'wall x1 y1 x2 y2 material_id'")
                x1, y1, x2, y2 = (float(v) for v in args[:4])
                walls.append([[x1, y1], [x2, y2]])
                materials.append(int(args[4]))
            elif tag == "tx":
                if len(args) != 2:
                    raise ValueError("expected 'tx x y'")
                tx = [float(args[0]), float(args[1])]
            elif tag == "rx":
                if len(args) != 2:
                    raise ValueError("expected 'rx x y'")
                rx.append([float(args[0]), float(args[1])])
            elif tag == "carrier":
                if len(args) != 1:
                    raise ValueError("expected 'carrier <Hz>'")
                carrier = float(args[0])
            else:
                raise ValueError(f"unknown record '{tag}'")
        except ValueError as exc:
            raise ValueError(f"scene line {lineno}: {exc}") from None
    if tx is None:
        raise ValueError("scene is missing a 'tx' record")
    if carrier is None:
        raise ValueError("scene is missing a 'carrier' record")
    return Scene(
        walls=np.asarray(walls, dtype=np.float64).reshape(-1, 2, 2),
        wall_materials=np.asarray(materials, dtype=np.int64),
        tx=np.asarray(tx),
        carrier_frequency=carrier,
        rx_grid=np.asarray(rx, dtype=np.float64).reshape(-1, 2),
    )


def format_scene(scene):
    lines = [f"carrier {scene.carrier_frequency!r}", f"tx {scene.tx[0]!r} {scene.tx[1]!r}"]
    for w in range(scene.walls.shape[0]):
        (x1, y1), (x2, y2) = scene.walls[w]
        lines.append(f"wall {x1!r} {y1!r} {x2!r} {y2!r} {scene.wall_materials[w]}")
    for x, y in scene.rx_grid:
        lines.append(f"rx {x!r} {y!r}")
    return "\n".join(lines) + "\n"


def load_scene(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scene(fh.read())


def save_scene(scene, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_scene(scene))

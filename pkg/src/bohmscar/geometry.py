"""Desymmetrized stadium domain and classical specular ray dynamics.

The quarter stadium is the unit square [0, a] x [0, r] glued to a quarter
disc of radius r centred at (a, 0).  Walls x = 0 and y = 0 are the symmetry
lines of the full stadium; y = r and the arc are the physical walls.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# tolerance for classifying a boundary hit as a corner event
CORNER_TOL = 1e-12


@dataclass(frozen=True)
class Wall:
    """A straight wall lying on a grid line.

    ``axis`` is the coordinate held fixed (0: x = value, 1: y = value);
    ``lo``/``hi`` bound the other coordinate.  ``outward`` is +1 if the
    exterior lies at larger coordinate values.
    """

    axis: int
    value: float
    lo: float
    hi: float
    outward: int

    def beyond(self, x: np.ndarray, y: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        """Mask of points strictly on the exterior side and within the wall extent."""
        c, o = (x, y) if self.axis == 0 else (y, x)
        side = (c - self.value) * self.outward > tol
        return side & (o >= self.lo - tol) & (o <= self.hi + tol)

    def mirror(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.axis == 0:
            return 2.0 * self.value - x, y
        return x, 2.0 * self.value - y


@dataclass(frozen=True)
class Stadium:
    """Quarter (desymmetrized) Bunimovich stadium with Dirichlet walls."""

    straight_length: float = 1.0
    radius: float = 1.0

    @property
    def area(self) -> float:
        return self.straight_length * self.radius + math.pi * self.radius**2 / 4.0

    @property
    def perimeter(self) -> float:
        a, r = self.straight_length, self.radius
        return r + a + (a + r) + math.pi * r / 2.0

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        return 0.0, self.straight_length + self.radius, 0.0, self.radius

    @property
    def grid_unit(self) -> float:
        """Length that the grid spacing must divide so straight walls fall on nodes."""
        return self.radius

    @property
    def mirror_walls(self) -> tuple[Wall, ...]:
        a, r = self.straight_length, self.radius
        return (
            Wall(0, 0.0, 0.0, r, -1),
            Wall(1, 0.0, 0.0, a + r, -1),
            Wall(1, r, 0.0, a, +1),
        )

    @property
    def corners(self) -> dict[str, tuple[float, float]]:
        a, r = self.straight_length, self.radius
        return {
            "origin": (0.0, 0.0),
            "top_left": (0.0, r),
            "junction": (a, r),
            "arc_end": (a + r, 0.0),
        }

    def params(self) -> dict:
        return {"kind": "stadium", "straight_length": self.straight_length, "radius": self.radius}

    def interior(self, x, y) -> np.ndarray:
        """Strict interior test, vectorised."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        a, r = self.straight_length, self.radius
        return (y > 0) & (y < r) & (x > 0) & ((x < a) | ((x - a) ** 2 + y**2 < r**2))

    def contains(self, x, y, tol: float = 1e-12) -> np.ndarray:
        """Closed-region test; boundary points count as inside."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        a, r = self.straight_length, self.radius
        box = (y >= -tol) & (y <= r + tol) & (x >= -tol)
        return box & ((x <= a + tol) | (np.hypot(x - a, y) <= r + tol))

    def distance_to_boundary(self, x: float, y: float) -> float:
        """Unsigned distance from an interior point to the boundary."""
        a, r = self.straight_length, self.radius
        d = [x, y]
        d.append(math.hypot(x - min(max(x, 0.0), a), y - r))
        if x >= a:
            d.append(abs(r - math.hypot(x - a, y)))
        else:
            # nearest point on the arc is its top end (a, r) or, for x < a, still on the arc
            ang = math.atan2(y, x - a)
            ang = min(max(ang, 0.0), math.pi / 2)
            d.append(math.hypot(x - a - r * math.cos(ang), y - r * math.sin(ang)))
        return min(d)

    # segment queries used by the ray tracer -------------------------------

    def _hits(self, p: np.ndarray, d: np.ndarray, eps: float):
        """All forward intersections (s, point, inward normal, segment name)."""
        a, r = self.straight_length, self.radius
        out = []
        if d[0] < 0:
            s = -p[0] / d[0]
            q = p + s * d
            if s > eps and -CORNER_TOL <= q[1] <= r + CORNER_TOL:
                out.append((s, q, np.array([1.0, 0.0]), "left"))
        if d[1] < 0:
            s = -p[1] / d[1]
            q = p + s * d
            if s > eps and -CORNER_TOL <= q[0] <= a + r + CORNER_TOL:
                out.append((s, q, np.array([0.0, 1.0]), "bottom"))
        if d[1] > 0:
            s = (r - p[1]) / d[1]
            q = p + s * d
            if s > eps and -CORNER_TOL <= q[0] <= a + CORNER_TOL:
                out.append((s, q, np.array([0.0, -1.0]), "top"))
        c = np.array([a, 0.0])
        w = p - c
        b = float(w @ d)
        disc = b * b - (float(w @ w) - r * r)
        if disc >= 0:
            root = math.sqrt(disc)
            for s in (-b - root, -b + root):
                q = p + s * d
                if s > eps and q[0] >= a - CORNER_TOL and q[1] >= -CORNER_TOL:
                    n = c - q
                    out.append((s, q, n / np.linalg.norm(n), "arc"))
        return out


@dataclass(frozen=True)
class Rectangle:
    """Axis-aligned rectangle [0, width] x [0, height]; oracle harness domain."""

    width: float = 1.0
    height: float = 1.0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def perimeter(self) -> float:
        return 2.0 * (self.width + self.height)

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        return 0.0, self.width, 0.0, self.height

    @property
    def grid_unit(self) -> float:
        return math.gcd(round(self.width * 1e6), round(self.height * 1e6)) / 1e6

    @property
    def mirror_walls(self) -> tuple[Wall, ...]:
        w, h = self.width, self.height
        return (
            Wall(0, 0.0, 0.0, h, -1),
            Wall(0, w, 0.0, h, +1),
            Wall(1, 0.0, 0.0, w, -1),
            Wall(1, h, 0.0, w, +1),
        )

    def params(self) -> dict:
        return {"kind": "rectangle", "width": self.width, "height": self.height}

    def interior(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (x > 0) & (x < self.width) & (y > 0) & (y < self.height)

    def contains(self, x, y, tol: float = 1e-12) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (x >= -tol) & (x <= self.width + tol) & (y >= -tol) & (y <= self.height + tol)

    def distance_to_boundary(self, x: float, y: float) -> float:
        return min(x, y, self.width - x, self.height - y)


Domain = Stadium | Rectangle


def domain_from_params(params: dict) -> Domain:
    kind = params.get("kind", "stadium")
    if kind == "stadium":
        return Stadium(float(params["straight_length"]), float(params["radius"]))
    if kind == "rectangle":
        return Rectangle(float(params["width"]), float(params["height"]))
    raise ValueError(f"unknown domain kind {kind!r}")


def contains(domain: Domain, p: Sequence[float]) -> bool:
    """True iff ``p`` lies in the closed region."""
    return bool(domain.contains(p[0], p[1]))


# ---------------------------------------------------------------------------
# classical rays


@dataclass(frozen=True)
class Ray:
    position: tuple[float, float]
    direction: tuple[float, float]
    speed: float = 1.0

    def __post_init__(self):
        n = math.hypot(*self.direction)
        if abs(n - 1.0) > 1e-12:
            object.__setattr__(self, "direction", (self.direction[0] / n, self.direction[1] / n))


@dataclass
class RayPath:
    """Piecewise-linear classical path; ``times[k]`` is when ``points[k]`` is reached.

    ``directions[k]`` is the heading on the segment leaving ``points[k]``.
    """

    times: np.ndarray
    points: np.ndarray
    directions: np.ndarray
    speed: float
    status: str = "ok"
    events: list[str] = field(default_factory=list)

    @property
    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))

    def position(self, t) -> np.ndarray:
        """Position(s) at time(s) ``t`` by linear interpolation along the path."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1)
        out = self.points[k] + ((t - self.times[k]) * self.speed)[:, None] * self.directions[k]
        return out

    def to_csv(self, path: str | Path) -> None:
        write_polyline_csv(path, self.times, self.points)


def _symmetry_corner(domain: Stadium, q: np.ndarray) -> str | None:
    for name, c in domain.corners.items():
        if math.hypot(q[0] - c[0], q[1] - c[1]) < CORNER_TOL * max(1.0, domain.radius):
            return name
    return None


def reflect_ray(domain: Stadium, ray: Ray, t_max: float, max_bounces: int = 100000) -> RayPath:
    """Propagate a classical ray with specular reflections for a time ``t_max``.

    Corners created by desymmetrization (origin, top-left, arc end) are right
    angles of the quarter domain and correspond to regular points of the full
    stadium; hitting one retro-reflects the ray.  Hitting the wall/arc junction
    (a, r) ends the path with status ``"corner"``.
    """
    p = np.array(ray.position, dtype=float)
    if not domain.contains(p[0], p[1]):
        raise ValueError(f"ray starts outside the domain at {tuple(p)}")
    d = np.array(ray.direction, dtype=float)
    total = ray.speed * t_max
    travelled = 0.0
    times, pts, dirs = [0.0], [p.copy()], [d.copy()]
    events: list[str] = []
    status = "ok"
    eps = 1e-12
    for _ in range(max_bounces):
        hits = domain._hits(p, d, eps)
        if not hits:
            raise RuntimeError(f"ray escaped the domain from {tuple(p)} heading {tuple(d)}")
        s, q, n, seg = min(hits, key=lambda h: h[0])
        if travelled + s >= total:
            p = p + (total - travelled) * d
            travelled = total
            times.append(total / ray.speed)
            pts.append(p.copy())
            dirs.append(d.copy())
            break
        travelled += s
        corner = _symmetry_corner(domain, q)
        if corner is not None:
            q = np.array(domain.corners[corner])
        p = q
        if corner == "junction":
            status = "corner"
            events.append("corner:junction")
            times.append(travelled / ray.speed)
            pts.append(p.copy())
            dirs.append(d.copy())
            break
        if corner is not None:
            d = -d
            events.append(f"corner:{corner}")
        else:
            d = d - 2.0 * float(d @ n) * n
            d /= np.linalg.norm(d)
            events.append(seg)
        times.append(travelled / ray.speed)
        pts.append(p.copy())
        dirs.append(d.copy())
    else:
        status = "max-bounces"
    return RayPath(np.array(times), np.array(pts), np.array(dirs), ray.speed, status, events)


@dataclass(frozen=True)
class Polyline:
    points: np.ndarray

    @property
    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.points[0] + self.points[-1]) if len(self.points) == 2 else self._arc_mid()

    def _arc_mid(self) -> np.ndarray:
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        half = cum[-1] / 2
        k = np.searchsorted(cum, half) - 1
        f = (half - cum[k]) / seg[k]
        return self.points[k] + f * (self.points[k + 1] - self.points[k])

    def period(self, speed: float) -> float:
        """Time for one forth-and-back traversal."""
        return 2.0 * self.length / speed

    def distance(self, x, y) -> np.ndarray:
        return distance_to_polyline(self.points, x, y)


def diagonal_po(domain: Stadium) -> Polyline:
    """The diagonal periodic orbit: chord from (0, r) to (a + r, 0)."""
    a, r = domain.straight_length, domain.radius
    return Polyline(np.array([[0.0, r], [a + r, 0.0]]))


def distance_to_polyline(points: np.ndarray, x, y) -> np.ndarray:
    """Euclidean distance from points (x, y) to a polyline, vectorised."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    best = np.full(np.broadcast(x, y).shape, np.inf)
    for p0, p1 in zip(points[:-1], points[1:]):
        seg = p1 - p0
        L2 = float(seg @ seg)
        s = np.clip(((x - p0[0]) * seg[0] + (y - p0[1]) * seg[1]) / L2, 0.0, 1.0)
        best = np.minimum(best, np.hypot(x - p0[0] - s * seg[0], y - p0[1] - s * seg[1]))
    return best


def write_polyline_csv(path: str | Path, times: Iterable[float], points: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y"])
        for t, (x, y) in zip(times, points):
            w.writerow([repr(float(t)), repr(float(x)), repr(float(y))])

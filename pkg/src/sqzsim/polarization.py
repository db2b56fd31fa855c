"""Polarization states, Poincare-sphere geometry and the three-piezo controller.

Fully polarized light is represented either as a normalized complex Jones
pair (ex, ey) or as a unit point on the Poincare sphere.  Conventions:

* s1 = |ex|^2 - |ey|^2, s2 = 2 Re(ex ey*), s3 = 2 Im(ex ey*)
* the crystal/vertical state V = (1, 0) sits at +s1
* right-circular (receiver point of view) (1, -1j)/sqrt(2) sits at +s3

A rotation of the sphere by `angle` about a unit axis corresponds to the
SU(2) action U = cos(angle/2) I - 1j sin(angle/2) (n . G) on Jones vectors,
with generators G = (sigma3, sigma1, -sigma2) matching the Stokes
convention above.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_NORM_TOL = 1e-12


class PolarizationError(ValueError):
    pass


@dataclass(frozen=True)
class JonesState:
    """Normalized complex field pair (ex, ey)."""

    ex: complex
    ey: complex

    def __post_init__(self):
        n = abs(self.ex) ** 2 + abs(self.ey) ** 2
        if n < 1e-30:
            raise PolarizationError("zero-norm Jones state")
        s = 1.0 / np.sqrt(n)
        object.__setattr__(self, "ex", complex(self.ex) * s)
        object.__setattr__(self, "ey", complex(self.ey) * s)

    def as_array(self):
        return np.array([self.ex, self.ey], dtype=complex)


@dataclass(frozen=True)
class StokesState:
    """Unit Poincare-sphere point (fully polarized light only)."""

    s1: float
    s2: float
    s3: float

    def __post_init__(self):
        n = np.sqrt(self.s1**2 + self.s2**2 + self.s3**2)
        if n < 1e-30:
            raise PolarizationError("zero-norm Stokes state")
        object.__setattr__(self, "s1", float(self.s1) / n)
        object.__setattr__(self, "s2", float(self.s2) / n)
        object.__setattr__(self, "s3", float(self.s3) / n)

    def as_array(self):
        return np.array([self.s1, self.s2, self.s3])

    def distance(self, other: "StokesState") -> float:
        """Great-circle (geodesic) angle to another state, in rad."""
        c = float(np.clip(np.dot(self.as_array(), other.as_array()), -1.0, 1.0))
        return float(np.arccos(c))


# counts <-> voltage of the digital piezo interface
PIEZO_COUNTS_MAX = 4095
PIEZO_VOLTS_MAX = 140.0
VOLTS_PER_COUNT = PIEZO_VOLTS_MAX / PIEZO_COUNTS_MAX


@dataclass
class PiezoBank:
    """Digital values driving the three fiber-squeezer piezos.

    Each count maps to voltage via `volts_per_count` and to a sphere
    rotation angle via the per-piezo `rad_per_volt` gain.
    """

    values: list = field(default_factory=lambda: [2048, 2048, 2048])
    volts_per_count: float = VOLTS_PER_COUNT
    # Full range ~2*pi per piezo so any rotation is reachable from center.
    rad_per_volt: tuple = (0.045, 0.045, 0.045)

    def __post_init__(self):
        self.values = [int(v) for v in self.values]
        for v in self.values:
            if not 0 <= v <= PIEZO_COUNTS_MAX:
                raise PolarizationError(f"piezo value {v} outside [0, {PIEZO_COUNTS_MAX}]")

    def voltage(self, k: int) -> float:
        return self.values[k] * self.volts_per_count

    def angle(self, k: int) -> float:
        """Sphere rotation angle commanded by piezo k."""
        return self.values[k] * self.volts_per_count * self.rad_per_volt[k]

    def radians_per_count(self, k: int) -> float:
        return self.volts_per_count * self.rad_per_volt[k]

    def copy(self) -> "PiezoBank":
        return PiezoBank(list(self.values), self.volts_per_count, tuple(self.rad_per_volt))


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if abs(n - 1.0) > 1e-9:
        raise PolarizationError("axis must be unit-norm")
    return v / n


@dataclass
class ControllerGeometry:
    """Rotation axes of the three piezos on the Poincare sphere.

    Piezos 1 and 3 share an axis; piezo 2 is tilted relative to them
    (the middle squeezer sits at 45 degrees in the physical device, which
    separates the rotation axes on the sphere).  Defaults: s1, s2, s1.
    """

    axes: tuple = (
        (1.0, 0.0, 0.0),
        (0.0, 1.0, 0.0),
        (1.0, 0.0, 0.0),
    )

    def __post_init__(self):
        axes = tuple(_unit(a) for a in self.axes)
        if len(axes) != 3:
            raise PolarizationError("three axes required")
        if abs(abs(np.dot(axes[0], axes[2])) - 1.0) > 1e-9:
            raise PolarizationError("axes 1 and 3 must be parallel")
        if abs(np.dot(axes[0], axes[1])) > 1.0 - 1e-9:
            raise PolarizationError("axis 2 must differ from axes 1/3")
        self.axes = axes


# Pauli generators ordered to match the (s1, s2, s3) convention.
_G1 = np.array([[1, 0], [0, -1]], dtype=complex)
_G2 = np.array([[0, 1], [1, 0]], dtype=complex)
_G3 = np.array([[0, 1j], [-1j, 0]], dtype=complex)


def rotation_spinor(axis, angle: float) -> np.ndarray:
    """SU(2) matrix rotating the Poincare sphere by `angle` about `axis`.

    Matches the right-handed Rodrigues rotation used by rotate_stokes; the
    +1j sign is forced by the receiver-side circular-polarization convention
    (the generator triple above closes left-handed).
    """
    n = _unit(axis)
    g = n[0] * _G1 + n[1] * _G2 + n[2] * _G3
    return np.cos(angle / 2.0) * np.eye(2, dtype=complex) + 1j * np.sin(angle / 2.0) * g


def great_circle_state(theta: float) -> JonesState:
    """State on the V-R great circle, a sphere angle 2*theta away from V."""
    if not np.isfinite(theta):
        raise PolarizationError("theta must be finite")
    return JonesState(np.cos(theta), -1j * np.sin(theta))


def stokes_from_jones(j: JonesState) -> StokesState:
    ex, ey = j.ex, j.ey
    return StokesState(
        abs(ex) ** 2 - abs(ey) ** 2,
        2.0 * (ex * np.conj(ey)).real,
        2.0 * (ex * np.conj(ey)).imag,
    )


def rotate_vector(v, axis, angle: float) -> np.ndarray:
    """Right-handed rotation of a plain 3-vector (Rodrigues form)."""
    n = _unit(axis)
    v = np.asarray(v, dtype=float)
    c, si = np.cos(angle), np.sin(angle)
    cross = np.array([n[1] * v[2] - n[2] * v[1],
                      n[2] * v[0] - n[0] * v[2],
                      n[0] * v[1] - n[1] * v[0]])
    return v * c + cross * si + n * np.dot(n, v) * (1.0 - c)


def rotate_stokes(s: StokesState, axis, angle: float) -> StokesState:
    """Rigid rotation of a sphere point about a unit axis; norm preserved."""
    return StokesState(*rotate_vector(s.as_array(), axis, angle))


def apply_spinor(u: np.ndarray, j: JonesState) -> JonesState:
    out = u @ j.as_array()
    return JonesState(out[0], out[1])


def controller_transform(g: ControllerGeometry, p: PiezoBank, j_in: JonesState) -> JonesState:
    """Apply the three piezo rotations (1 then 2 then 3) to an input state."""
    j = j_in
    for k in range(3):
        j = apply_spinor(rotation_spinor(g.axes[k], p.angle(k)), j)
    return j


def mode_overlap(j1: JonesState, j2: JonesState) -> float:
    """Interference efficiency |<j1, j2>|^2 in [0, 1]."""
    ip = np.conj(j1.as_array()) @ j2.as_array()
    return float(min(1.0, abs(ip) ** 2))


def inner_product(j1: JonesState, j2: JonesState) -> complex:
    """<j1, j2> = sum conj(j1) * j2 (overlap amplitude and phase)."""
    return complex(np.conj(j1.as_array()) @ j2.as_array())


def search_piezo_alignment(
    geometry: ControllerGeometry,
    bank: PiezoBank,
    j_in: JonesState,
    target: StokesState,
    cycles: int = 6,
) -> PiezoBank:
    """Cyclic per-axis search of piezo counts minimizing distance to target.

    Works on integer counts with progressively refined bracketing, the way
    the digital controller would; returns the best bank found.
    """
    from scipy.optimize import minimize_scalar

    angles = [bank.angle(k) for k in range(3)]
    tgt = target.as_array()

    def dist(angs):
        j = j_in
        for k in range(3):
            j = apply_spinor(rotation_spinor(geometry.axes[k], angs[k]), j)
        return -float(np.dot(stokes_from_jones(j).as_array(), tgt))

    for _ in range(cycles):
        for k in range(3):
            lo = 0.0
            hi = PIEZO_COUNTS_MAX * bank.radians_per_count(k)

            def f(a, k=k):
                trial = list(angles)
                trial[k] = a
                return dist(trial)

            res = minimize_scalar(f, bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-10})
            angles[k] = float(res.x)

    out = bank.copy()
    # keep exact angles rather than quantizing: the search characterizes
    # geometric reachability, the control loops handle integer counts
    out.values = [
        int(np.clip(round(a / bank.radians_per_count(k)), 0, PIEZO_COUNTS_MAX))
        for k, a in enumerate(angles)
    ]
    out._exact_angles = angles  # stashed for tests that need sub-count residuals
    return out


def transform_with_angles(geometry: ControllerGeometry, angles, j_in: JonesState) -> JonesState:
    j = j_in
    for k in range(3):
        j = apply_spinor(rotation_spinor(geometry.axes[k], angles[k]), j)
    return j

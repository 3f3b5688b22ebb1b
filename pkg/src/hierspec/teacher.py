"""Compositional teacher: Hermite features -> latent directions -> weighted He_2 -> readout."""
from __future__ import annotations

import base64
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .seeding import stream
from .tensor_hermite import (
    DeskScaleError,
    basis_size,
    gauss_expectation,
    multi_index_basis,
    project_features,
)

SQRT2 = math.sqrt(2.0)
ROUNDING = {"floor": math.floor, "round": lambda v: math.floor(v + 0.5), "ceil": math.ceil}
DIRECTION_SCALES = ("unit", "dq", "D")
# Rows generated per RNG block; the block layout is part of the determinism contract.
DATA_BLOCK = 8192
DEFAULT_MAX_ELEMENTS = 2**28


@dataclass(frozen=True)
class Readout:
    """Scalar link ``g``; polynomials hold monomial coefficients, lowest degree first."""

    kind: str
    coeffs: tuple = ()

    @classmethod
    def parse(cls, text: str) -> "Readout":
        text = text.strip()
        if text in ("identity", "tanh"):
            return cls(text)
        if text.startswith("poly:"):
            return cls.polynomial([float(c) for c in text[5:].split(",")])
        raise ValueError(f"unknown readout {text!r}; expected identity, tanh or poly:c0,c1,...")

    @classmethod
    def polynomial(cls, coeffs) -> "Readout":
        coeffs = [float(c) for c in coeffs]
        if not coeffs:
            raise ValueError("polynomial readout needs at least one coefficient")
        raw = np.polynomial.Polynomial(coeffs)
        coeffs[0] -= gauss_expectation(raw, nodes=max(64, len(coeffs)))
        return cls("poly", tuple(coeffs))

    @property
    def name(self) -> str:
        if self.kind == "poly":
            return "poly:" + ",".join(repr(c) for c in self.coeffs)
        return self.kind

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "identity":
            return t.copy()
        if self.kind == "tanh":
            return np.tanh(t)
        return np.polynomial.polynomial.polyval(t, self.coeffs)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "identity":
            return np.ones_like(t)
        if self.kind == "tanh":
            return 1.0 / np.cosh(t) ** 2
        return np.polynomial.polynomial.polyval(t, np.polynomial.polynomial.polyder(self.coeffs))


@dataclass(frozen=True)
class TeacherSpec:
    d: int
    q: int = 2
    epsilon: float = 0.5
    gamma: float = 0.4
    readout: str = "identity"
    direction_scale: str = "unit"
    fix_signs: bool = False
    orthogonalize: bool = False
    rounding: str = "floor"
    seed: int = 0

    @property
    def d1(self) -> int:
        # Guard against d**eps landing a hair below an integer (e.g. 400**0.5).
        value = self.d ** self.epsilon
        near = round(value)
        if abs(value - near) < 1e-9 * max(1.0, value):
            return int(near)
        return int(ROUNDING[self.rounding](value))

    @property
    def D(self) -> int:
        return basis_size(self.d, self.q)

    @property
    def g(self) -> Readout:
        return Readout.parse(self.readout)

    def validate(self) -> "TeacherSpec":
        if self.d < 1 or self.q < 1:
            raise ValueError("d and q must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.rounding not in ROUNDING:
            raise ValueError(f"rounding must be one of {sorted(ROUNDING)}")
        if self.direction_scale not in DIRECTION_SCALES:
            raise ValueError(f"direction_scale must be one of {DIRECTION_SCALES}")
        if self.d1 < 1:
            raise ValueError(f"d1 = {self.d1} after {self.rounding} rounding of d**epsilon")
        if self.d1 > self.D:
            raise ValueError(f"d1 = {self.d1} exceeds the feature dimension D = {self.D}")
        if self.epsilon >= self.q / 2:
            warnings.warn("epsilon >= q/2 is outside the theory's range", stacklevel=2)
        if self.gamma < 0.5 and self.epsilon >= self.q / (1 - 2 * self.gamma):
            warnings.warn("epsilon >= q/(1-2 gamma) is outside the theory's range", stacklevel=2)
        g = self.g
        mean = gauss_expectation(g)
        slope = gauss_expectation(g.derivative)
        if abs(mean) > 1e-8:
            warnings.warn(f"readout is not centered: E[g(Z)] = {mean:.3g}", stacklevel=2)
        if abs(slope) < 1e-8:
            warnings.warn("readout has E[g'(Z)] = 0 (information exponent above one)", stacklevel=2)
        return self


def normalization_constant(d1: int, gamma: float) -> float:
    if d1 < 1:
        raise ValueError("d1 must be at least 1")
    i = np.arange(1, d1 + 1, dtype=float)
    return float(np.sum(i ** (-2.0 * gamma)) ** -0.5)


@dataclass(frozen=True, eq=False)
class Teacher:
    spec: TeacherSpec
    a1: np.ndarray
    z: np.ndarray
    z_gamma: float
    lambdas: np.ndarray = field(init=False)

    def __post_init__(self):
        i = np.arange(1, self.spec.d1 + 1, dtype=float)
        object.__setattr__(self, "lambdas", self.z_gamma * self.z * i ** (-self.spec.gamma))

    @property
    def d1(self) -> int:
        return self.a1.shape[0]

    @property
    def basis(self):
        return multi_index_basis(self.spec.d, self.spec.q)

    def readout_fn(self) -> Readout:
        return self.spec.g

    def to_json(self) -> str:
        a1 = np.ascontiguousarray(self.a1, dtype="<f8")
        doc = {
            "spec": asdict(self.spec),
            "z": [int(v) for v in self.z],
            "z_gamma": self.z_gamma,
            "a1": {"shape": list(a1.shape), "dtype": "<f8", "data": base64.b64encode(a1.tobytes()).decode()},
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Teacher":
        doc = json.loads(text)
        spec = TeacherSpec(**doc["spec"])
        raw = base64.b64decode(doc["a1"]["data"])
        a1 = np.frombuffer(raw, dtype="<f8").reshape(doc["a1"]["shape"]).astype(float)
        return cls(spec, a1, np.asarray(doc["z"], dtype=float), float(doc["z_gamma"]))


def sample_teacher(spec: TeacherSpec) -> Teacher:
    spec.validate()
    d1, D = spec.d1, spec.D
    a1 = stream(spec.seed, "teacher", "a1").standard_normal((d1, D))
    if spec.orthogonalize:
        qmat, r = np.linalg.qr(a1.T)
        a1 = (qmat * np.sign(np.diag(r))).T
    if spec.direction_scale == "unit":
        a1 = a1 / np.linalg.norm(a1, axis=1, keepdims=True)
    elif spec.orthogonalize:
        # Orthonormal rows rescaled to the nominal row norm of the chosen entry variance.
        a1 = a1 * math.sqrt(D / spec.d**spec.q if spec.direction_scale == "dq" else 1.0)
    elif spec.direction_scale == "dq":
        a1 = a1 / math.sqrt(spec.d**spec.q)
    else:
        a1 = a1 / math.sqrt(D)
    if spec.fix_signs:
        z = np.ones(d1)
    else:
        z = stream(spec.seed, "teacher", "z").choice([-1.0, 1.0], size=d1)
    return Teacher(spec, a1, z, normalization_constant(d1, spec.gamma))


def latent_first(teacher: Teacher, f) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != teacher.a1.shape[1]:
        raise ValueError(f"feature length {f.shape[-1]} != D = {teacher.a1.shape[1]}")
    return f @ teacher.a1.T


def latent_second(teacher: Teacher, h1) -> np.ndarray | float:
    h1 = np.asarray(h1, dtype=float)
    if h1.shape[-1] != teacher.d1:
        raise ValueError(f"latent length {h1.shape[-1]} != d1 = {teacher.d1}")
    out = ((h1 * h1 - 1.0) @ teacher.lambdas) / SQRT2
    return float(out) if out.ndim == 0 else out


def labels(teacher: Teacher, x: np.ndarray, chunk: int = DATA_BLOCK) -> np.ndarray:
    """Labels for a batch of inputs (rows of ``x``)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != teacher.spec.d:
        raise ValueError(f"input dimension {x.shape[1]} != d = {teacher.spec.d}")
    g = teacher.readout_fn()
    out = np.empty(x.shape[0])
    for lo in range(0, x.shape[0], chunk):
        h1 = project_features(x[lo : lo + chunk], teacher.a1.T, teacher.basis)
        out[lo : lo + chunk] = g(latent_second(teacher, h1))
    return out


def label(teacher: Teacher, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("label expects a single input vector; use labels() for batches")
    return float(labels(teacher, x[None, :])[0])


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError("x must be n x d with one label per row")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def head(self, n: int) -> "Dataset":
        if not 1 <= n <= self.n:
            raise ValueError(f"cannot take {n} rows from a dataset of {self.n}")
        return Dataset(self.x[:n], self.y[:n])


def sample_dataset(
    teacher: Teacher,
    n: int,
    seed: int,
    stream_label: str = "train",
    max_elements: int = DEFAULT_MAX_ELEMENTS,
) -> Dataset:
    """Draw ``n`` Gaussian inputs and their labels.

    Rows come in fixed blocks with one RNG stream each, so a smaller ``n``
    under the same seed and label yields an exact prefix of a larger draw.
    """
    n = int(n)
    d = teacher.spec.d
    if n < 1:
        raise ValueError("n must be at least 1")
    if n * d > max_elements:
        raise DeskScaleError(f"n*d = {n * d} exceeds the memory cap of {max_elements} elements")
    x = np.empty((n, d))
    y = np.empty(n)
    for b, lo in enumerate(range(0, n, DATA_BLOCK)):
        hi = min(lo + DATA_BLOCK, n)
        block = stream(seed, "data", stream_label, d, b).standard_normal((DATA_BLOCK, d))
        x[lo:hi] = block[: hi - lo]
        y[lo:hi] = labels(teacher, x[lo:hi])
    return Dataset(x, y)

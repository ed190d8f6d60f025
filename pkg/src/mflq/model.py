"""Problem representation for mean-field LQ control with jumps.

Coefficients are stored as per-grid-point samples (piecewise constant
between points).  Jump coefficients are stored per mark atom, so every
integral against the mark measure is a finite weighted sum.  Path arrays
are path-major: ``(M, num_steps + 1, ...)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ProblemFileError

SYMMETRY_TOL = 1e-10

COEFFICIENT_NAMES = ("A", "Abar", "B", "Bbar", "C", "Cbar", "D", "Dbar",
                     "M", "Mbar", "N", "Nbar")
COST_NAMES = ("Q", "Qbar", "S", "Sbar", "R", "Rbar")
JUMP_NAMES = ("M", "Mbar", "N", "Nbar")


# ---------------------------------------------------------------------------
# Grid and mark measure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid ``s_k = t0 + k*dt`` for ``k = 0..num_steps``."""

    t0: float
    T: float
    dt: float
    num_steps: int = field(init=False)

    def __post_init__(self):
        if not (np.isfinite(self.t0) and np.isfinite(self.T) and np.isfinite(self.dt)):
            raise ValueError("grid parameters must be finite")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.T <= self.t0:
            raise ValueError(f"horizon T={self.T} must exceed t0={self.t0}")
        steps = int(round((self.T - self.t0) / self.dt))
        if steps < 1:
            raise ValueError("grid must contain at least one step")
        object.__setattr__(self, "num_steps", steps)

    @property
    def size(self) -> int:
        return self.num_steps + 1

    @property
    def points(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.size, dtype=float)

    @property
    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.size, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w

    def with_horizon(self, T: float) -> "TimeGrid":
        return TimeGrid(self.t0, T, self.dt)


class MarkMeasure:
    """Finite-activity mark measure given as weighted atoms per jump component.

    Parameters
    ----------
    atoms : sequence of arrays
        For component ``j`` an array of shape ``(K_j, l)`` of mark points.
    weights : sequence of arrays
        For component ``j`` the nonnegative intensities ``w_{j,k}`` (1/s).

    Notes
    -----
    Atoms of all components are flattened into a single list of ``P`` atoms;
    ``atom_component[p]`` and ``atom_weight[p]`` identify each one.
    """

    def __init__(self, atoms: Sequence[Any] = (), weights: Sequence[Any] = ()):
        if len(atoms) != len(weights):
            raise ValueError("atoms and weights must list the same components")
        self.atoms = []
        self.weights = []
        for j, (a, w) in enumerate(zip(atoms, weights)):
            w = np.atleast_1d(np.asarray(w, dtype=float))
            a = np.asarray(a, dtype=float)
            if a.ndim == 1:
                a = a.reshape(len(w), -1) if a.size else a.reshape(len(w), 0)
            if a.shape[0] != w.shape[0]:
                raise ValueError(f"component {j}: {a.shape[0]} atoms but {w.shape[0]} weights")
            if np.any(~np.isfinite(w)) or np.any(w < 0):
                raise ValueError(f"component {j}: weights must be finite and nonnegative")
            if np.any(~np.isfinite(a)):
                raise ValueError(f"component {j}: atoms must be finite")
            self.atoms.append(a)
            self.weights.append(w)
        comp = [np.full(len(w), j, dtype=np.int64) for j, w in enumerate(self.weights)]
        self.atom_component = np.concatenate(comp) if comp else np.zeros(0, dtype=np.int64)
        self.atom_weight = (np.concatenate(self.weights) if self.weights
                            else np.zeros(0))

    @property
    def num_components(self) -> int:
        return len(self.weights)

    @property
    def num_atoms(self) -> int:
        return int(self.atom_weight.size)

    @property
    def intensities(self) -> np.ndarray:
        return np.array([w.sum() for w in self.weights], dtype=float)

    def atom_points(self) -> list[np.ndarray]:
        return [a[k] for a in self.atoms for k in range(a.shape[0])]

    def fibre_norm_sq(self, values: np.ndarray) -> np.ndarray:
        """Return ``sum_p w_p |values[..., p, :]|^2`` over the trailing ``(P, n)`` axes."""
        values = np.asarray(values, dtype=float)
        return np.einsum("...pi,...pi,p->...", values, values, self.atom_weight)

    def to_dict(self) -> list[dict]:
        return [{"atoms": a.tolist(), "weights": w.tolist()}
                for a, w in zip(self.atoms, self.weights)]

    def __eq__(self, other):
        if not isinstance(other, MarkMeasure) or self.num_components != other.num_components:
            return False
        return all(np.array_equal(a, b) and np.array_equal(v, w)
                   for a, b, v, w in zip(self.atoms, other.atoms, self.weights, other.weights))


# ---------------------------------------------------------------------------
# Coefficients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoefficientSet:
    """State-equation coefficient tracks sampled on the grid.

    Shapes (``G = num_steps + 1``, ``P`` mark atoms): ``A, Abar: (G, n, n)``,
    ``B, Bbar: (G, n, m)``, ``C, Cbar: (G, d, n, n)``, ``D, Dbar: (G, d, n, m)``,
    ``M, Mbar: (G, P, n, n)``, ``N, Nbar: (G, P, n, m)``.
    """

    A: np.ndarray
    Abar: np.ndarray
    B: np.ndarray
    Bbar: np.ndarray
    C: np.ndarray
    Cbar: np.ndarray
    D: np.ndarray
    Dbar: np.ndarray
    M: np.ndarray
    Mbar: np.ndarray
    N: np.ndarray
    Nbar: np.ndarray

    def combined(self, name: str, iota: int) -> np.ndarray:
        return combine_coefficient(getattr(self, name), getattr(self, name + "bar"), iota)


@dataclass(frozen=True)
class CostSet:
    """Quadratic cost tracks and the weight exponent ``K`` (1/s)."""

    Q: np.ndarray
    Qbar: np.ndarray
    S: np.ndarray
    Sbar: np.ndarray
    R: np.ndarray
    Rbar: np.ndarray
    K: float = 0.0

    def combined(self, name: str, iota: int) -> np.ndarray:
        return combine_coefficient(getattr(self, name), getattr(self, name + "bar"), iota)

    def scaled(self, c: float) -> "CostSet":
        return CostSet(*(c * getattr(self, k) for k in COST_NAMES), K=self.K)

    def has_cross_terms(self, tol: float = 0.0) -> bool:
        return bool(np.max(np.abs(self.S), initial=0.0) > tol
                    or np.max(np.abs(self.Sbar), initial=0.0) > tol)


@dataclass(frozen=True)
class InitialLaw:
    """Initial state law: a deterministic vector or a Gaussian."""

    mean: np.ndarray
    cov: np.ndarray | None = None

    def sample(self, num_paths: int, rng: np.random.Generator | None = None) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=float)
        if self.cov is None:
            return np.broadcast_to(mean, (num_paths, mean.size)).copy()
        if rng is None:
            raise ValueError("a random generator is required for a Gaussian initial law")
        vals, vecs = np.linalg.eigh(np.asarray(self.cov, dtype=float))
        root = vecs * np.sqrt(np.clip(vals, 0.0, None))
        return mean + rng.standard_normal((num_paths, mean.size)) @ root.T

    def to_dict(self) -> dict:
        d = {"mean": np.asarray(self.mean).tolist()}
        if self.cov is not None:
            d["cov"] = np.asarray(self.cov).tolist()
        return d


@dataclass(frozen=True)
class ProblemSpec:
    """Complete problem: dimensions, coefficients, cost, marks, grid and initial law."""

    dims: tuple[int, int, int, int]
    coeffs: CoefficientSet
    cost: CostSet
    marks: MarkMeasure
    grid: TimeGrid
    x0_law: InitialLaw
    sources: Mapping[str, Any] | None = field(default=None, compare=False, repr=False)

    @property
    def n(self) -> int:
        return self.dims[0]

    @property
    def m(self) -> int:
        return self.dims[1]

    @property
    def d(self) -> int:
        return self.dims[2]

    @property
    def l(self) -> int:
        return self.dims[3]

    @property
    def K(self) -> float:
        return self.cost.K

    def with_K(self, K: float) -> "ProblemSpec":
        return replace(self, cost=replace(self.cost, K=float(K)))

    def with_cost(self, cost: CostSet) -> "ProblemSpec":
        return replace(self, cost=cost)

    def with_x0(self, mean, cov=None) -> "ProblemSpec":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        if mean.shape != (self.n,):
            raise ValueError(f"initial state must have shape ({self.n},)")
        return replace(self, x0_law=InitialLaw(mean, None if cov is None else np.asarray(cov, float)))

    def with_grid(self, grid: TimeGrid) -> "ProblemSpec":
        """Resample every coefficient on a new grid (needs non-tabulated sources)."""
        if self.sources is None:
            raise ValueError("spec has no coefficient sources; cannot resample on a new grid")
        for key, src in self.sources.items():
            if isinstance(src, _Table):
                raise ValueError(f"coefficient {key} is tabulated on the grid and cannot be resampled")
        kwargs = dict(self.sources)
        return make_spec(self.n, self.m, self.d, grid, marks=self.marks,
                         x0=self.x0_law.mean, x0_cov=self.x0_law.cov, K=self.K, **kwargs)


@dataclass(frozen=True)
class ForcingTuple:
    """Forcing data of the linear forward-backward family.

    Each entry is ``None`` (zero), a deterministic track of shape
    ``(G, ...)`` or a per-path array of shape ``(M, G, ...)``.

    Attributes
    ----------
    driver : backward-driver forcing, trailing shape ``(n,)``
    drift : forward drift forcing, ``(n,)``
    diffusion : diffusion forcing, ``(d, n)``
    jump : jump forcing per mark atom, ``(P, n)``
    """

    driver: np.ndarray | None = None
    drift: np.ndarray | None = None
    diffusion: np.ndarray | None = None
    jump: np.ndarray | None = None

    def is_zero(self) -> bool:
        return all(v is None or not np.any(v)
                   for v in (self.driver, self.drift, self.diffusion, self.jump))


@dataclass(frozen=True)
class ControlProcess:
    """Open-loop control: per-path values ``(M, G, m)`` and the mean track ``(G, m)``.

    The mean track is the control's expectation; it enters the dynamics and
    the cost through the barred coefficients.
    """

    paths: np.ndarray
    mean: np.ndarray

    @classmethod
    def from_paths(cls, paths: np.ndarray, mean: np.ndarray | None = None) -> "ControlProcess":
        paths = np.asarray(paths, dtype=float)
        mean = empirical_mean(paths) if mean is None else np.asarray(mean, dtype=float)
        return cls(paths, mean)

    @classmethod
    def deterministic(cls, track: np.ndarray, num_paths: int) -> "ControlProcess":
        track = np.asarray(track, dtype=float)
        return cls(np.broadcast_to(track, (num_paths,) + track.shape).copy(), track.copy())

    @classmethod
    def zero(cls, num_paths: int, grid: TimeGrid, m: int) -> "ControlProcess":
        return cls(np.zeros((num_paths, grid.size, m)), np.zeros((grid.size, m)))

    def __add__(self, other: "ControlProcess") -> "ControlProcess":
        return ControlProcess(self.paths + other.paths, self.mean + other.mean)

    def scale(self, c: float) -> "ControlProcess":
        return ControlProcess(c * self.paths, c * self.mean)


@dataclass(frozen=True)
class FeedbackControl:
    """Affine feedback on the grid: ``u = G x + Gbar E[x] + c``.

    ``gain, gain_bar: (G, m, n)``; ``offset: (G, m)`` or ``None``.
    """

    gain: np.ndarray
    gain_bar: np.ndarray
    offset: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------

def combine_coefficient(gamma: np.ndarray, gamma_bar: np.ndarray, iota: int) -> np.ndarray:
    """Return ``Gamma`` for ``iota=1`` and ``Gamma + Gamma_bar`` for ``iota=2``."""
    gamma = np.asarray(gamma, dtype=float)
    gamma_bar = np.asarray(gamma_bar, dtype=float)
    if gamma.shape != gamma_bar.shape:
        raise ValueError(f"shape mismatch: {gamma.shape} vs {gamma_bar.shape}")
    if iota == 1:
        return gamma
    if iota == 2:
        return gamma + gamma_bar
    raise ValueError(f"iota must be 1 or 2, got {iota}")


def empirical_mean(samples: np.ndarray) -> np.ndarray:
    """Mean over the leading path axis with fixed-order summation."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] == 0:
        raise ValueError("no paths")
    # add.reduce over the leading axis accumulates rows in path order
    return np.add.reduce(samples, axis=0) / samples.shape[0]


def split_mean(samples: np.ndarray, mean: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Split a path ensemble into fluctuation and mean parts.

    Parameters
    ----------
    samples : ndarray, shape (M, ...)
    mean : ndarray, optional
        Exact mean track; the empirical mean is used when omitted.

    Returns
    -------
    fluctuation, mean : ndarrays with ``fluctuation + mean == samples``.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 0 or samples.shape[0] == 0:
        raise ValueError("no paths")
    mean = empirical_mean(samples) if mean is None else np.asarray(mean, dtype=float)
    return samples - mean, np.broadcast_to(mean, samples.shape[1:]).copy()


def _squared_magnitude(process: np.ndarray, marks: MarkMeasure | None) -> np.ndarray:
    """Per (path, grid point) squared magnitude; jump arrays use the fibre norm."""
    if marks is not None:
        return marks.fibre_norm_sq(process).reshape(process.shape[:2] + (-1,)).sum(axis=-1)
    flat = process.reshape(process.shape[0], process.shape[1], -1)
    return np.einsum("mki,mki->mk", flat, flat)


def weighted_norm_samples(process: np.ndarray, K: float, grid: TimeGrid,
                          marks: MarkMeasure | None = None) -> np.ndarray:
    """Per-path contributions to :func:`weighted_norm` (their mean is the norm).

    ``process`` has shape ``(M, G, ...)``; with ``marks`` the trailing axes
    are ``(P, n)``.
    """
    process = np.asarray(process, dtype=float)
    if process.ndim < 2 or process.shape[1] != grid.size:
        raise ValueError(f"process must have shape (M, {grid.size}, ...), got {process.shape}")
    weights = grid.trapezoid_weights * np.exp(2.0 * K * grid.points)
    return _squared_magnitude(process, marks) @ weights


def weighted_norm(process: np.ndarray, K: float, grid: TimeGrid,
                  marks: MarkMeasure | None = None, deterministic: bool = False) -> float:
    """Squared weighted norm ``E int_{t0}^{T} |p(s) e^{Ks}|^2 ds`` by the trapezoidal rule.

    Parameters
    ----------
    process : ndarray
        Shape ``(M, G, ...)``, or ``(G, ...)`` when ``deterministic``.
    K : float
        Weight exponent.
    grid : TimeGrid
    marks : MarkMeasure, optional
        When given, the trailing ``(P, n)`` axes carry jump components and
        the fibre norm ``sum_p w_p |p_p|^2`` is used pointwise.
    deterministic : bool
        Treat ``process`` as a single deterministic track.
    """
    process = np.asarray(process, dtype=float)
    if deterministic:
        process = process[None]
    return float(empirical_mean(weighted_norm_samples(process, K, grid, marks)))


def apply_track(mat: np.ndarray, paths: np.ndarray) -> np.ndarray:
    """Apply ``(G, ..., a, b)`` coefficient tracks to ``(M, G, b)`` paths, giving ``(M, G, ..., a)``."""
    G, lead, (a, b) = mat.shape[0], mat.shape[1:-2], mat.shape[-2:]
    flat = np.swapaxes(mat.reshape(G, -1, b), 1, 2)
    out = np.matmul(paths[:, :, None, :], flat)
    return out.reshape(paths.shape[:2] + lead + (a,))


def contract_track(mat: np.ndarray, paths: np.ndarray) -> np.ndarray:
    """``sum_{lead, a} mat[k, lead, a, u] paths[m, k, lead, a]`` for ``(G, ..., a, u)`` tracks."""
    G, u = mat.shape[0], mat.shape[-1]
    flat = mat.reshape(G, -1, u)
    pf = paths.reshape(paths.shape[:2] + (1, flat.shape[1]))
    return np.matmul(pf, flat)[:, :, 0]


def weighted_inner(a: np.ndarray, b: np.ndarray, K: float, grid: TimeGrid,
                   weights: np.ndarray | None = None) -> float:
    """Weighted inner product ``E int <a, b> e^{2Ks} ds`` for ``(M, G, ...)`` arrays.

    ``weights`` optionally gives per-atom weights for trailing ``(P, n)`` axes.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    prod = a * b
    if weights is not None:
        prod = prod * weights[:, None]
    prod = prod.reshape(prod.shape[0], prod.shape[1], -1).sum(axis=-1)
    w = grid.trapezoid_weights * np.exp(2.0 * K * grid.points)
    return float(empirical_mean(prod @ w))


# ---------------------------------------------------------------------------
# Spec construction
# ---------------------------------------------------------------------------

class _Table(np.ndarray):
    """Marker subclass for coefficient data tabulated on a specific grid."""


def as_table(values) -> np.ndarray:
    """Mark an array as a per-grid-point table (leading axis = grid point)."""
    return np.asarray(values, dtype=float).view(_Table)


def _track(name: str, src, shape: tuple, grid: TimeGrid) -> np.ndarray:
    """Sample a plain coefficient source onto the grid as ``(G,) + shape``."""
    G = grid.size
    if src is None:
        return np.zeros((G,) + shape)
    if callable(src):
        vals = np.array([np.asarray(src(s), dtype=float).reshape(shape) for s in grid.points])
        return np.ascontiguousarray(vals)
    arr = np.asarray(src, dtype=float)
    if isinstance(src, _Table) or (arr.ndim == len(shape) + 1 and arr.shape[0] == G
                                   and arr.shape[1:] == shape):
        if arr.shape != (G,) + shape:
            raise ValueError(f"{name}: table shape {arr.shape} does not match {(G,) + shape}")
        return np.ascontiguousarray(np.asarray(arr))
    if arr.ndim == 0 and int(np.prod(shape)) == 1:
        arr = arr.reshape(shape)
    if len(shape) == 3 and shape[0] == 1 and arr.shape == shape[1:]:
        arr = arr.reshape(shape)
    if arr.shape != shape:
        raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
    return np.ascontiguousarray(np.broadcast_to(arr, (G,) + shape))


def _jump_track(name: str, src, shape: tuple, grid: TimeGrid, marks: MarkMeasure) -> np.ndarray:
    """Sample a jump coefficient onto ``(G, P) + shape``.

    Accepted sources: ``None``; a constant ``shape`` matrix (all atoms); a
    ``(P,) + shape`` per-atom array; an ``(l,) + shape`` per-component array;
    a callable ``f(s, e, j)``; or a ``(G, P) + shape`` table.
    """
    G, P = grid.size, marks.num_atoms
    if src is None or P == 0:
        return np.zeros((G, P) + shape)
    if callable(src):
        pts = marks.atom_points()
        vals = np.array([[np.asarray(src(s, pts[p], int(marks.atom_component[p])), dtype=float)
                          .reshape(shape) for p in range(P)] for s in grid.points])
        return np.ascontiguousarray(vals)
    arr = np.asarray(src, dtype=float)
    if arr.ndim == 0 and int(np.prod(shape)) == 1:
        arr = arr.reshape(shape)
    if arr.shape == shape:
        per_atom = np.broadcast_to(arr, (P,) + shape)
    elif arr.shape == (P,) + shape:
        per_atom = arr
    elif arr.shape == (marks.num_components,) + shape:
        per_atom = arr[marks.atom_component]
    elif arr.shape == (G, P) + shape:
        return np.ascontiguousarray(arr)
    else:
        raise ValueError(f"{name}: cannot interpret jump coefficient of shape {arr.shape}")
    return np.ascontiguousarray(np.broadcast_to(per_atom, (G, P) + shape))


def _symmetrize(name: str, X: np.ndarray) -> np.ndarray:
    asym = np.max(np.abs(X - np.swapaxes(X, -1, -2)), initial=0.0)
    scale = np.max(np.abs(X), initial=0.0)
    if asym > SYMMETRY_TOL * max(scale, np.finfo(float).tiny):
        raise ValueError(f"{name} is not symmetric (relative asymmetry {asym / scale:.3e} > 1e-10)")
    return 0.5 * (X + np.swapaxes(X, -1, -2))


def make_spec(n: int, m: int, d: int, grid: TimeGrid, marks: MarkMeasure | None = None,
              x0=None, x0_cov=None, K: float = 0.0, **sources) -> ProblemSpec:
    """Build a :class:`ProblemSpec` from constants, callables or tables.

    Coefficients default to zero; ``R`` defaults to the identity.  Plain
    coefficients accept a constant matrix, a callable ``f(s)`` or a table
    produced by :func:`as_table`.  ``C, Cbar, D, Dbar`` carry a leading
    Brownian axis of length ``d`` (a single matrix is accepted when ``d == 1``).
    """
    marks = marks if marks is not None else MarkMeasure()
    unknown = set(sources) - set(COEFFICIENT_NAMES) - set(COST_NAMES)
    if unknown:
        raise ValueError(f"unknown coefficient names: {sorted(unknown)}")
    if min(n, m) < 1 or d < 0:
        raise ValueError("dimensions must satisfy n, m >= 1 and d >= 0")
    src = dict(sources)
    if "R" not in src:
        src["R"] = np.eye(m)
    shapes = {"A": (n, n), "B": (n, m), "C": (d, n, n), "D": (d, n, m),
              "Q": (n, n), "S": (m, n), "R": (m, m)}
    jump_shapes = {"M": (n, n), "N": (n, m)}
    tracks = {}
    for name in COEFFICIENT_NAMES + COST_NAMES:
        base = name[:-3] if name.endswith("bar") else name
        if base in jump_shapes:
            tracks[name] = _jump_track(name, src.get(name), jump_shapes[base], grid, marks)
        else:
            tracks[name] = _track(name, src.get(name), shapes[base], grid)
        if not np.all(np.isfinite(tracks[name])):
            raise ValueError(f"{name} has non-finite entries")
    for name in ("Q", "Qbar", "R", "Rbar"):
        tracks[name] = _symmetrize(name, tracks[name])
    coeffs = CoefficientSet(*(tracks[k] for k in COEFFICIENT_NAMES))
    cost = CostSet(*(tracks[k] for k in COST_NAMES), K=float(K))
    x0 = np.zeros(n) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (n,):
        raise ValueError(f"initial state must have shape ({n},), got {x0.shape}")
    cov = None if x0_cov is None else np.asarray(x0_cov, dtype=float).reshape(n, n)
    law = InitialLaw(x0, cov)
    return ProblemSpec((n, m, d, marks.num_components), coeffs, cost, marks, grid, law,
                       sources={k: v for k, v in src.items() if v is not None})


# ---------------------------------------------------------------------------
# Problem documents
# ---------------------------------------------------------------------------

def _doc_value(name: str, value):
    if isinstance(value, Mapping):
        if "table" not in value:
            raise ProblemFileError(f"{name}: object values must carry a 'table' key")
        return as_table(value["table"])
    return np.asarray(value, dtype=float)


def problem_from_dict(doc: Mapping[str, Any]) -> ProblemSpec:
    """Build a spec from a parsed problem document."""
    try:
        for key in ("dims", "grid"):
            if key not in doc:
                raise ProblemFileError(f"problem document lacks the '{key}' section")
        dims = doc["dims"]
        n, m, d = int(dims["n"]), int(dims["m"]), int(dims.get("d", 0))
        g = doc["grid"]
        grid = TimeGrid(float(g.get("t0", 0.0)), float(g["T"]), float(g.get("dt", 1e-3)))
        mark_doc = doc.get("marks", []) or []
        marks = MarkMeasure([c["atoms"] for c in mark_doc], [c["weights"] for c in mark_doc])
        if "l" in dims and int(dims["l"]) != marks.num_components:
            raise ProblemFileError(f"dims.l={dims['l']} but {marks.num_components} mark components given")
        sources = {}
        for section in ("coefficients", "cost"):
            for name, value in (doc.get(section) or {}).items():
                sources[name] = _doc_value(name, value)
        init = doc.get("initial_state", None)
        if isinstance(init, Mapping):
            x0, cov = init.get("mean"), init.get("cov")
        else:
            x0, cov = init, None
        return make_spec(n, m, d, grid, marks=marks, x0=x0, x0_cov=cov,
                         K=float(doc.get("weight_K", 0.0)), **sources)
    except ProblemFileError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ProblemFileError(f"invalid problem document: {exc}") from exc


def load_problem(path: str | Path) -> ProblemSpec:
    """Read a JSON problem file; parse errors report line and column."""
    path = Path(path)
    if not path.is_file():
        raise ProblemFileError(f"file not found: {path}")
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemFileError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return problem_from_dict(doc)


def _tolist(v):
    arr = np.asarray(v, dtype=float)
    if isinstance(v, _Table):
        return {"table": arr.tolist()}
    return arr.tolist()


def problem_to_dict(spec: ProblemSpec) -> dict:
    """Serialize a spec built from constant or tabulated sources."""
    if spec.sources is None or any(callable(v) for v in spec.sources.values()):
        raise ValueError("only specs built from constants or tables can be serialized")
    coeffs = {k: _tolist(v) for k, v in spec.sources.items() if k in COEFFICIENT_NAMES}
    cost = {k: _tolist(v) for k, v in spec.sources.items() if k in COST_NAMES}
    return {
        "dims": {"n": spec.n, "m": spec.m, "d": spec.d, "l": spec.l},
        "grid": {"t0": spec.grid.t0, "T": spec.grid.T, "dt": spec.grid.dt},
        "weight_K": spec.K,
        "coefficients": coeffs,
        "cost": cost,
        "marks": spec.marks.to_dict(),
        "initial_state": spec.x0_law.to_dict(),
    }


def dump_problem(spec: ProblemSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(problem_to_dict(spec), indent=2) + "\n")


"""Problem definition: one leader-follower game instance on a uniform grid.

State dynamics (n-dimensional, one-dimensional Brownian motion)::

    dx = [A x + B1 u1 + B2 u2 + b + A_hat Ex + B1_hat Eu1 + B2_hat Eu2] ds
       + [C x + D1 u1 + D2 u2 + sigma + C_hat Ex + D1_hat Eu1 + D2_hat Eu2] dW

Each player i carries quadratic running weights (Q, S1, S2, R11, R12, R21,
R22 and hatted mean-channel counterparts), linear terms (q, rho1, rho2) and
terminal weights (G, G_hat, g, g_hat).  All inhomogeneous data (b, sigma, q,
rho, g) are deterministic; this keeps every backward equation an ODE.

The initial state is Gaussian with user-given mean and covariance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import (
    AsymmetricWeight,
    BadCovariance,
    BadGrid,
    DimensionMismatch,
    MissingField,
    ParseError,
)
from .grids import TimeGrid, broadcast_path

SYM_TOL = 1e-12          # absolute symmetry tolerance on user inputs
COV_EIG_FLOOR = -1e-10   # covariance eigenvalues below this are rejected

# (field, shape key) tables; shape keys resolved against (n, m1, m2)
_COEFF_SHAPES = {
    "A": ("n", "n"), "A_hat": ("n", "n"),
    "B1": ("n", "m1"), "B1_hat": ("n", "m1"),
    "B2": ("n", "m2"), "B2_hat": ("n", "m2"),
    "C": ("n", "n"), "C_hat": ("n", "n"),
    "D1": ("n", "m1"), "D1_hat": ("n", "m1"),
    "D2": ("n", "m2"), "D2_hat": ("n", "m2"),
}
_WEIGHT_SHAPES = {
    "Q": ("n", "n"), "Q_hat": ("n", "n"),
    "S1": ("m1", "n"), "S1_hat": ("m1", "n"),
    "S2": ("m2", "n"), "S2_hat": ("m2", "n"),
    "R11": ("m1", "m1"), "R11_hat": ("m1", "m1"),
    "R12": ("m2", "m1"), "R12_hat": ("m2", "m1"),
    "R21": ("m1", "m2"), "R21_hat": ("m1", "m2"),
    "R22": ("m2", "m2"), "R22_hat": ("m2", "m2"),
}
_WEIGHT_VECTORS = {"q": ("n",), "rho1": ("m1",), "rho2": ("m2",)}
_SYMMETRIC_WEIGHTS = ("Q", "Q_hat", "R11", "R11_hat", "R22", "R22_hat")


@dataclass
class PlayerWeights:
    """Cost weights of one player; matrix entries are node-indexed paths."""

    Q: np.ndarray
    Q_hat: np.ndarray
    S1: np.ndarray
    S1_hat: np.ndarray
    S2: np.ndarray
    S2_hat: np.ndarray
    R11: np.ndarray
    R11_hat: np.ndarray
    R12: np.ndarray
    R12_hat: np.ndarray
    R21: np.ndarray
    R21_hat: np.ndarray
    R22: np.ndarray
    R22_hat: np.ndarray
    q: np.ndarray
    rho1: np.ndarray
    rho2: np.ndarray
    G: np.ndarray
    G_hat: np.ndarray
    g: np.ndarray
    g_hat: np.ndarray


@dataclass
class ProblemSpec:
    """Fully materialized game instance; see :func:`make_problem` to build one."""

    n: int
    m1: int
    m2: int
    grid: TimeGrid
    A: np.ndarray
    A_hat: np.ndarray
    B1: np.ndarray
    B1_hat: np.ndarray
    B2: np.ndarray
    B2_hat: np.ndarray
    C: np.ndarray
    C_hat: np.ndarray
    D1: np.ndarray
    D1_hat: np.ndarray
    D2: np.ndarray
    D2_hat: np.ndarray
    b: np.ndarray
    sigma: np.ndarray
    player1: PlayerWeights
    player2: PlayerWeights
    xi_mean: np.ndarray
    xi_cov: np.ndarray
    validated: bool = False

    def dims(self):
        return self.n, self.m1, self.m2

    def weights(self, player: int) -> PlayerWeights:
        if player == 1:
            return self.player1
        if player == 2:
            return self.player2
        raise ValueError(f"player must be 1 or 2, got {player}")


# ValidatedProblem is the same object, tagged; kept as an alias for signatures.
ValidatedProblem = ProblemSpec


def _resolve(shape_key, n, m1, m2):
    table = {"n": n, "m1": m1, "m2": m2}
    return tuple(table[k] for k in shape_key)


def make_problem(n, m1, m2, grid: TimeGrid, coeffs=None, weights=None,
                 inhomog=None, initial=None) -> ProblemSpec:
    """Build a ProblemSpec from (possibly constant) samples; zeros by default.

    ``coeffs``/``inhomog`` map field names to constant matrices or full paths;
    ``weights`` holds per-player dicts under keys "player1"/"player2";
    ``initial`` holds "mean" and "cov".  Anything omitted defaults to zero.
    """
    coeffs = dict(coeffs or {})
    weights = dict(weights or {})
    inhomog = dict(inhomog or {})
    initial = dict(initial or {})

    def path_of(table, name, shape):
        value = table.pop(name, None)
        if value is None:
            return np.zeros((grid.n_nodes,) + shape)
        try:
            return broadcast_path(value, grid, shape)
        except ValueError as exc:
            raise DimensionMismatch(name, ("K+1",) + shape,
                                    np.asarray(value).shape) from exc

    kw = {name: path_of(coeffs, name, _resolve(sk, n, m1, m2))
          for name, sk in _COEFF_SHAPES.items()}
    if coeffs:
        raise ParseError(f"unknown coefficient fields: {sorted(coeffs)}")

    players = {}
    for tag in ("player1", "player2"):
        wsrc = dict(weights.get(tag) or {})
        wkw = {name: path_of(wsrc, name, _resolve(sk, n, m1, m2))
               for name, sk in _WEIGHT_SHAPES.items()}
        for name, sk in _WEIGHT_VECTORS.items():
            wkw[name] = path_of(wsrc, name, _resolve(sk, n, m1, m2))
        for name, shape in (("G", (n, n)), ("G_hat", (n, n)),
                            ("g", (n,)), ("g_hat", (n,))):
            value = wsrc.pop(name, None)
            arr = (np.zeros(shape) if value is None
                   else np.asarray(value, dtype=float).reshape(shape)
                   if np.asarray(value).size == int(np.prod(shape))
                   else None)
            if arr is None:
                raise DimensionMismatch(f"{tag}.{name}", shape,
                                        np.asarray(value).shape)
            wkw[name] = arr
        if wsrc:
            raise ParseError(f"unknown weight fields in {tag}: {sorted(wsrc)}")
        players[tag] = PlayerWeights(**wkw)

    b = path_of(inhomog, "b", (n,))
    sigma = path_of(inhomog, "sigma", (n,))
    if inhomog:
        raise ParseError(f"unknown inhomogeneous fields: {sorted(inhomog)}")

    xi_mean = np.asarray(initial.get("mean", np.zeros(n)), dtype=float).reshape(n)
    xi_cov = np.asarray(initial.get("cov", np.zeros((n, n))),
                        dtype=float).reshape(n, n)

    return ProblemSpec(n=n, m1=m1, m2=m2, grid=grid, b=b, sigma=sigma,
                       player1=players["player1"], player2=players["player2"],
                       xi_mean=xi_mean, xi_cov=xi_cov, **kw)


def refine_problem(spec: ProblemSpec, factor: int) -> ProblemSpec:
    """Same problem on a grid with ``factor`` times as many steps.

    Node values between old nodes come from linear interpolation, matching
    the interpolation convention used inside the integrators (exact for
    constant-in-time coefficients).
    """
    import dataclasses

    old = spec.grid
    grid = TimeGrid(old.t0, old.T, old.n_steps * factor)
    u = np.linspace(0.0, old.n_steps, grid.n_nodes)
    i = np.clip(np.floor(u).astype(int), 0, old.n_steps - 1)
    wgt = (u - i).reshape(-1, *([1] * 1))

    def refit(path):
        w = wgt.reshape((-1,) + (1,) * (path.ndim - 1))
        return (1.0 - w) * path[i] + w * path[i + 1]

    def refit_obj(obj, skip=()):
        changes = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, np.ndarray) and f.name not in skip \
                    and v.shape[:1] == (old.n_nodes,):
                changes[f.name] = refit(v)
        return changes

    out = dataclasses.replace(
        spec, grid=grid, validated=False,
        player1=dataclasses.replace(spec.player1, **refit_obj(spec.player1)),
        player2=dataclasses.replace(spec.player2, **refit_obj(spec.player2)),
        **refit_obj(spec, skip=("xi_mean",)))
    return validate(out)


def _check_shape(name, arr, expected):
    if arr.shape != expected:
        raise DimensionMismatch(name, expected, arr.shape)


def _check_symmetric_path(name, path):
    dev = np.max(np.abs(path - np.swapaxes(path, -1, -2)), axis=(-1, -2))
    worst = int(np.argmax(dev))
    if dev[worst] > SYM_TOL:
        raise AsymmetricWeight(name, worst, float(dev[worst]))


def _check_symmetric(name, M):
    dev = float(np.max(np.abs(M - M.T))) if M.size else 0.0
    if dev > SYM_TOL:
        raise AsymmetricWeight(name, -1, dev)


def validate(spec: ProblemSpec) -> ValidatedProblem:
    """Check every structural invariant and return the spec tagged valid.

    Idempotent: validating an already-validated spec returns it unchanged.
    Raises DimensionMismatch / AsymmetricWeight / BadGrid / BadCovariance.
    """
    if spec.validated:
        return spec
    n, m1, m2 = spec.dims()
    if spec.grid.n_steps < 2:
        raise BadGrid(f"solvers need n_steps >= 2, got {spec.grid.n_steps}")
    K1 = spec.grid.n_nodes

    for name, sk in _COEFF_SHAPES.items():
        _check_shape(name, getattr(spec, name), (K1,) + _resolve(sk, n, m1, m2))
    _check_shape("b", spec.b, (K1, n))
    _check_shape("sigma", spec.sigma, (K1, n))

    for i, w in ((1, spec.player1), (2, spec.player2)):
        tag = f"player{i}"
        for name, sk in _WEIGHT_SHAPES.items():
            _check_shape(f"{tag}.{name}", getattr(w, name),
                         (K1,) + _resolve(sk, n, m1, m2))
        for name, sk in _WEIGHT_VECTORS.items():
            _check_shape(f"{tag}.{name}", getattr(w, name),
                         (K1,) + _resolve(sk, n, m1, m2))
        for name, shape in (("G", (n, n)), ("G_hat", (n, n)),
                            ("g", (n,)), ("g_hat", (n,))):
            _check_shape(f"{tag}.{name}", getattr(w, name), shape)
        for name in _SYMMETRIC_WEIGHTS:
            _check_symmetric_path(f"{tag}.{name}", getattr(w, name))
        _check_symmetric(f"{tag}.G", w.G)
        _check_symmetric(f"{tag}.G_hat", w.G_hat)
        # R12(s)^T == R21(s) and the hatted pair, nodewise
        for a, bname in (("R12", "R21"), ("R12_hat", "R21_hat")):
            gap = np.max(np.abs(np.swapaxes(getattr(w, a), -1, -2)
                                - getattr(w, bname)), axis=(-1, -2))
            worst = int(np.argmax(gap))
            if gap[worst] > SYM_TOL:
                raise AsymmetricWeight(f"{tag}.{a}^T != {tag}.{bname}",
                                       worst, float(gap[worst]))

    _check_shape("xi_mean", spec.xi_mean, (n,))
    _check_shape("xi_cov", spec.xi_cov, (n, n))
    if float(np.max(np.abs(spec.xi_cov - spec.xi_cov.T))) > SYM_TOL:
        raise BadCovariance("xi_cov is not symmetric")
    eigs = np.linalg.eigvalsh(0.5 * (spec.xi_cov + spec.xi_cov.T))
    if eigs.size and float(eigs.min()) < COV_EIG_FLOOR:
        raise BadCovariance(f"xi_cov has negative eigenvalue {eigs.min():.3e}")

    _freeze(spec)
    spec.validated = True
    return spec


def _freeze(spec):
    # immutable after validation: safe to share read-only across threads
    for f in fields(spec):
        v = getattr(spec, f.name)
        if isinstance(v, np.ndarray):
            v.flags.writeable = False
        elif isinstance(v, PlayerWeights):
            for g in fields(v):
                getattr(v, g.name).flags.writeable = False


# ---------------------------------------------------------------------------
# JSON round trip.  A matrix path is stored either as one row-major matrix
# (constant in time) or as a list of node matrices of length n_steps + 1.
# ---------------------------------------------------------------------------

def _path_to_json(path):
    first = path[0]
    if np.array_equal(np.broadcast_to(first, path.shape), path):
        return first.tolist()
    return path.tolist()


def save_spec(spec: ProblemSpec, path) -> None:
    """Write the problem file; floats use repr so a reload is bit-exact."""
    doc = {
        "n": spec.n, "m1": spec.m1, "m2": spec.m2,
        "t0": spec.grid.t0, "T": spec.grid.T, "n_steps": spec.grid.n_steps,
        "coeffs": {name: _path_to_json(getattr(spec, name))
                   for name in _COEFF_SHAPES},
        "weights": {},
        "inhomog": {"b": _path_to_json(spec.b),
                    "sigma": _path_to_json(spec.sigma)},
        "initial": {"mean": spec.xi_mean.tolist(),
                    "cov": spec.xi_cov.tolist()},
    }
    for tag in ("player1", "player2"):
        w = getattr(spec, tag)
        entry = {name: _path_to_json(getattr(w, name))
                 for name in list(_WEIGHT_SHAPES) + list(_WEIGHT_VECTORS)}
        entry.update(G=w.G.tolist(), G_hat=w.G_hat.tolist(),
                     g=w.g.tolist(), g_hat=w.g_hat.tolist())
        doc["weights"][tag] = entry
    Path(path).write_text(json.dumps(doc, indent=1))


def load_spec(path) -> ProblemSpec:
    """Read a problem file; constant entries broadcast to every grid node."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    for key in ("n", "m1", "m2", "t0", "T", "n_steps"):
        if key not in doc:
            raise MissingField(f"{path}: missing top-level field '{key}'")
    try:
        grid = TimeGrid(float(doc["t0"]), float(doc["T"]), int(doc["n_steps"]))
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path}: bad grid fields: {exc}") from exc
    try:
        return make_problem(int(doc["n"]), int(doc["m1"]), int(doc["m2"]), grid,
                            coeffs=doc.get("coeffs"), weights=doc.get("weights"),
                            inhomog=doc.get("inhomog"), initial=doc.get("initial"))
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from exc

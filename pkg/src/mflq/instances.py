"""Bundled game instances used by the CLI example, tests and acceptance runs."""

from __future__ import annotations

import dataclasses

import numpy as np

from .grids import TimeGrid
from .problem import ProblemSpec, make_problem, validate


def scalar_benchmark(n_steps: int = 200) -> ProblemSpec:
    """Scalar instance with mean-field terms, noise and inhomogeneous data on.

    All solvability monitors stay comfortably positive definite on [0, 1];
    this is the default instance the CLI ships with.
    """
    grid = TimeGrid(0.0, 1.0, n_steps)
    coeffs = {
        "A": 0.2, "A_hat": 0.1, "B1": 1.0, "B1_hat": 0.2,
        "B2": 0.8, "B2_hat": 0.1, "C": 0.15, "C_hat": 0.05,
        "D1": 0.3, "D1_hat": 0.1, "D2": 0.25, "D2_hat": 0.05,
    }
    weights = {
        "player1": {
            "Q": 1.0, "Q_hat": 0.2, "S1": 0.05, "S2": 0.02,
            "R11": 1.0, "R11_hat": 0.1, "R12": 0.02, "R21": 0.02,
            "R22": 0.5, "q": 0.01, "rho1": 0.01,
            "G": 1.0, "G_hat": 0.2, "g": 0.05, "g_hat": 0.02,
        },
        "player2": {
            "Q": 0.8, "Q_hat": 0.1, "S1": 0.02, "S2": 0.03,
            "R11": 0.3, "R12": 0.01, "R21": 0.01,
            "R22": 1.0, "R22_hat": 0.1, "q": 0.01, "rho2": 0.01,
            "G": 1.0, "G_hat": 0.1, "g": 0.03, "g_hat": 0.01,
        },
    }
    inhomog = {"b": 0.05, "sigma": 0.2}
    initial = {"mean": [1.0], "cov": [[0.25]]}
    return validate(make_problem(1, 1, 1, grid, coeffs, weights, inhomog, initial))


def mean_field_off(spec: ProblemSpec) -> ProblemSpec:
    """Copy of ``spec`` with every hatted coefficient/weight and g_hat zeroed."""
    def strip(obj):
        changes = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if f.name.endswith("_hat") and isinstance(v, np.ndarray):
                changes[f.name] = np.zeros_like(v)
        return dataclasses.replace(obj, **changes)

    out = strip(spec)
    out = dataclasses.replace(out, player1=strip(spec.player1),
                              player2=strip(spec.player2), validated=False)
    return validate(out)


def two_state_benchmark(n_steps: int = 160) -> ProblemSpec:
    """n = 2 instance with PD weights; exercises the non-scalar code paths."""
    grid = TimeGrid(0.0, 1.0, n_steps)
    coeffs = {
        "A": [[0.1, 0.05], [0.0, -0.1]], "A_hat": [[0.05, 0.0], [0.02, 0.0]],
        "B1": [[1.0], [0.3]], "B1_hat": [[0.1], [0.0]],
        "B2": [[0.5], [0.8]], "B2_hat": [[0.0], [0.1]],
        "C": [[0.1, 0.0], [0.05, 0.1]], "C_hat": [[0.02, 0.0], [0.0, 0.02]],
        "D1": [[0.2], [0.1]], "D1_hat": [[0.05], [0.0]],
        "D2": [[0.1], [0.2]], "D2_hat": [[0.0], [0.05]],
    }
    weights = {
        "player1": {
            "Q": [[1.0, 0.1], [0.1, 0.8]], "Q_hat": [[0.2, 0.0], [0.0, 0.2]],
            "S1": [[0.03, 0.0]], "R11": [[1.0]], "R11_hat": [[0.1]],
            "R12": [[0.02]], "R21": [[0.02]], "R22": [[0.4]],
            "G": [[1.0, 0.0], [0.0, 0.5]], "G_hat": [[0.1, 0.0], [0.0, 0.1]],
            "g": [0.02, 0.0], "g_hat": [0.01, 0.0],
        },
        "player2": {
            "Q": [[0.7, 0.0], [0.0, 0.9]], "Q_hat": [[0.1, 0.0], [0.0, 0.1]],
            "S2": [[0.02, 0.01]], "R11": [[0.2]], "R22": [[1.0]],
            "R22_hat": [[0.1]], "G": [[0.8, 0.1], [0.1, 0.6]],
            "G_hat": [[0.05, 0.0], [0.0, 0.05]], "g": [0.01, 0.02],
        },
    }
    inhomog = {"b": [0.02, 0.0], "sigma": [0.1, 0.05]}
    initial = {"mean": [1.0, -0.5],
               "cov": [[0.2, 0.02], [0.02, 0.1]]}
    return validate(make_problem(2, 1, 1, grid, coeffs, weights, inhomog, initial))


def convexity_failure_instance(n_steps: int = 80) -> ProblemSpec:
    """Leader cost made strongly concave in the state (Q2 = -10 I).

    Used to demonstrate that convexity sampling flags non-convex problems;
    the follower side stays well-posed.
    """
    grid = TimeGrid(0.0, 1.0, n_steps)
    coeffs = {"A": 0.1, "B1": 1.0, "B2": 1.0, "C": 0.1, "D1": 0.1, "D2": 0.1}
    weights = {
        "player1": {"Q": 1.0, "R11": 1.0, "R22": 0.1, "G": 1.0},
        "player2": {"Q": -10.0, "R11": 0.1, "R22": 1.0, "G": 0.0},
    }
    initial = {"mean": [1.0], "cov": [[0.0]]}
    return validate(make_problem(1, 1, 1, grid, coeffs, weights, None, initial))

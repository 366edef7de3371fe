"""Finite feature spaces with exact per-client label laws.

A :class:`GridWorld` stores, for a handful of grid points, the feature
marginal each client sees and the conditional label distribution of every
client next to the shared ground truth. Because everything is a finite table,
risks and the noise term of the generalization bound are computed by
enumeration instead of sampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .data import LabeledDataset
from .errors import DomainError, ParseError, ShapeError

_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class GridWorld:
    points: np.ndarray          # (P, d) features in [0, 1]
    class_count: int
    marginals: np.ndarray       # (N, P) feature law of each client
    client_tables: np.ndarray   # (N, P, C) Pr_{pi_k}(Y = i | x)
    truth_table: np.ndarray     # (P, C) Pr_mu(Y = i | x)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        marg = np.array(self.marginals, dtype=np.float64)
        if marg.ndim == 1:
            marg = marg[None, :]
        tables = np.array(self.client_tables, dtype=np.float64)
        truth = np.array(self.truth_table, dtype=np.float64)
        n_pts, c = pts.shape[0], int(self.class_count)
        if truth.shape != (n_pts, c):
            raise ShapeError(f"truth table shape {truth.shape} != ({n_pts}, {c})")
        if tables.ndim != 3 or tables.shape[1:] != (n_pts, c):
            raise ShapeError(f"client tables shape {tables.shape} != (N, {n_pts}, {c})")
        if marg.shape[0] == 1 and tables.shape[0] > 1:
            marg = np.repeat(marg, tables.shape[0], axis=0)
        if marg.shape != (tables.shape[0], n_pts):
            raise ShapeError(f"marginals shape {marg.shape} != ({tables.shape[0]}, {n_pts})")
        if np.any(pts < 0) or np.any(pts > 1):
            raise DomainError("grid points must lie in [0, 1]^d")
        for name, arr in (("marginal", marg), ("client table", tables), ("truth table", truth)):
            if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=-1) - 1.0) > _TOL):
                raise DomainError(f"every {name} row must be a probability vector")
        for a in (pts, marg, tables, truth):
            a.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "class_count", c)
        object.__setattr__(self, "marginals", marg)
        object.__setattr__(self, "client_tables", tables)
        object.__setattr__(self, "truth_table", truth)

    @property
    def n_clients(self) -> int:
        return self.client_tables.shape[0]

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def marginal(self) -> np.ndarray:
        """The shared feature law (client 0's; the others match it when ``shares_marginal()``)."""
        return self.marginals[0]

    def shares_marginal(self) -> bool:
        return bool(np.all(self.marginals == self.marginals[0]))

    def mismatched_pairs(self) -> int:
        """Number of (client, point) pairs whose label law differs from the truth."""
        diff = np.any(self.client_tables != self.truth_table[None], axis=-1)
        return int(diff.sum())

    def sample(self, client: int, n: int, seed: int) -> LabeledDataset:
        return grid_world_sample(self, client, n, seed)

    def to_text(self) -> str:
        return world_to_text(self)

    def __eq__(self, other):
        if not isinstance(other, GridWorld):
            return NotImplemented
        return self.class_count == other.class_count and all(
            np.array_equal(a, b) for a, b in (
                (self.points, other.points), (self.marginals, other.marginals),
                (self.client_tables, other.client_tables), (self.truth_table, other.truth_table)))

    __hash__ = None


def grid_world_sample(world: GridWorld, client: int, n: int, seed: int) -> LabeledDataset:
    """i.i.d. draws: a grid point from the client's marginal, then a label from its table."""
    if not 0 <= client < world.n_clients:
        raise DomainError(f"client {client} not in world with {world.n_clients} clients")
    if n < 1:
        raise DomainError("need at least one draw")
    rng = np.random.default_rng(seed)
    idx = rng.choice(world.n_points, size=n, p=world.marginals[client])
    u = rng.random(n)
    cdf = np.cumsum(world.client_tables[client][idx], axis=1)
    labels = np.minimum((u[:, None] >= cdf).sum(axis=1), world.class_count - 1)
    return LabeledDataset(world.points[idx], labels, world.class_count)


def one_hot_table(labels: Sequence[int], class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    table = np.zeros((labels.size, class_count))
    table[np.arange(labels.size), labels] = 1.0
    return table


def world_from_truth(points: np.ndarray, truth_labels: Sequence[int], class_count: int,
                     flipped: Sequence[Sequence[int]], marginal: np.ndarray | None = None) -> GridWorld:
    """Deterministic ground truth plus per-client flipped point sets.

    At a flipped point client ``k`` sees label ``(y + 1) mod C`` with
    certainty, which for two classes is the A/B swap.
    """
    points = np.asarray(points, dtype=np.float64)
    truth_labels = np.asarray(truth_labels, dtype=np.int64)
    n_pts = points.shape[0]
    truth = one_hot_table(truth_labels, class_count)
    tables = []
    for pts in flipped:
        labels = truth_labels.copy()
        pts = np.asarray(sorted(set(int(p) for p in pts)), dtype=np.int64)
        if pts.size and (pts.min() < 0 or pts.max() >= n_pts):
            raise DomainError("flipped point index out of range")
        labels[pts] = (labels[pts] + 1) % class_count
        tables.append(one_hot_table(labels, class_count))
    if marginal is None:
        marginal = np.full(n_pts, 1.0 / n_pts)
    return GridWorld(points, class_count, np.asarray(marginal)[None, :], np.stack(tables), truth)


def square_grid(side: int = 5) -> np.ndarray:
    """``side x side`` points evenly spaced on [0, 1]^2, row-major in (i, j)."""
    coords = np.linspace(0.0, 1.0, side)
    return np.array([(coords[i], coords[j]) for i in range(side) for j in range(side)])


def fig2_truth(side: int = 5) -> np.ndarray:
    """Two classes split by the anti-diagonal: class 0 ("A") where i + j <= side - 2."""
    return np.array([0 if i + j <= side - 2 else 1 for i in range(side) for j in range(side)])


# Three class-A points next to the boundary (i + j == 3) for client 1, and one
# more class-A point for client 2 in the second world. Only the counts matter
# for the noise term; the positions are arbitrary.
FIG2_CLIENT1_FLIPS = (0 * 5 + 3, 1 * 5 + 2, 2 * 5 + 1)
FIG2_WORLD2_CLIENT2_FLIPS = (3 * 5 + 0,)


def fig2_worlds() -> tuple[GridWorld, GridWorld]:
    """The 25-point, 2-class, 2-client examples with uniform feature marginals.

    World 1: client 1 mislabels three class-A points, client 2 is clean.
    World 2: as world 1, and client 2 also mislabels one point.
    """
    points, truth = square_grid(5), fig2_truth(5)
    w1 = world_from_truth(points, truth, 2, [FIG2_CLIENT1_FLIPS, ()])
    w2 = world_from_truth(points, truth, 2, [FIG2_CLIENT1_FLIPS, FIG2_WORLD2_CLIENT2_FLIPS])
    return w1, w2


def flip_fraction_world(fractions: Sequence[float], seed: int, side: int = 5) -> GridWorld:
    """Anti-diagonal two-class world where client k mislabels ``round(f_k * side^2)`` points.

    Each client takes the front of its own seeded permutation of the grid, so
    a larger fraction with the same seed and client index flips a superset.
    """
    points, truth = square_grid(side), fig2_truth(side)
    n_pts = points.shape[0]
    flipped = []
    for k, f in enumerate(fractions):
        if not 0.0 <= f <= 1.0:
            raise DomainError(f"flip fraction {f} outside [0, 1]")
        count = int(np.floor(f * n_pts + 0.5))
        order = np.random.default_rng([seed, k]).permutation(n_pts)
        flipped.append(order[:count])
    return world_from_truth(points, truth, 2, flipped)


# ---------------------------------------------------------------------------
# text serialization
#
#   gridworld v1 points=P clients=N classes=C dim=D
#   truth <point> <x_1,...,x_D> <p_1,...,p_C>
#   client <k> <point> <x_1,...,x_D> <marginal> <p_1,...,p_C>
#
# Numbers are written as exact fractions when a small denominator reproduces
# the float bit-for-bit, otherwise as the shortest round-trip decimal.


def _fmt(v: float) -> str:
    frac = Fraction(v).limit_denominator(1_000_000)
    if float(frac) == v:
        return str(frac)
    return repr(float(v))


def _num(tok: str) -> float:
    return float(Fraction(tok))


def world_to_text(world: GridWorld) -> str:
    n, p, c = world.n_clients, world.n_points, world.class_count
    d = world.points.shape[1]
    lines = [f"gridworld v1 points={p} clients={n} classes={c} dim={d}"]
    for j in range(p):
        x = ",".join(_fmt(v) for v in world.points[j])
        lines.append(f"truth {j} {x} " + ",".join(_fmt(v) for v in world.truth_table[j]))
    for k in range(n):
        for j in range(p):
            x = ",".join(_fmt(v) for v in world.points[j])
            probs = ",".join(_fmt(v) for v in world.client_tables[k, j])
            lines.append(f"client {k} {j} {x} {_fmt(world.marginals[k, j])} {probs}")
    return "\n".join(lines) + "\n"


def world_from_text(text: str) -> GridWorld:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or not lines[0].startswith("gridworld v1"):
        raise ParseError("header", "expected 'gridworld v1 ...'")
    try:
        meta = dict(tok.split("=") for tok in lines[0].split()[2:])
        p, n, c, d = (int(meta[k]) for k in ("points", "clients", "classes", "dim"))
    except (KeyError, ValueError) as exc:
        raise ParseError("header", f"bad header fields: {exc}") from None
    points = np.full((p, d), np.nan)
    truth = np.full((p, c), np.nan)
    marg = np.full((n, p), np.nan)
    tables = np.full((n, p, c), np.nan)
    for lineno, ln in enumerate(lines[1:], start=2):
        tok = ln.split()
        try:
            if tok[0] == "truth":
                j = int(tok[1])
                points[j] = [_num(t) for t in tok[2].split(",")]
                truth[j] = [_num(t) for t in tok[3].split(",")]
            elif tok[0] == "client":
                k, j = int(tok[1]), int(tok[2])
                marg[k, j] = _num(tok[4])
                tables[k, j] = [_num(t) for t in tok[5].split(",")]
            else:
                raise ParseError(f"line {lineno}", f"unknown record {tok[0]!r}")
        except (IndexError, ValueError, ZeroDivisionError) as exc:
            raise ParseError(f"line {lineno}", str(exc)) from None
    if np.isnan(points).any() or np.isnan(truth).any() or np.isnan(marg).any() or np.isnan(tables).any():
        raise ParseError("body", "missing records")
    return GridWorld(points, c, marg, tables, truth)

"""Risks, the label-noise generalization bound, and trend fits.

A *source* describes what the clients hold, in one of three forms:

* a :class:`~noisyfed.grid.GridWorld`: exact tables, so every expectation is
  an enumeration over (grid point, class);
* a :class:`PairedShards`: each client's noised shard next to its clean
  original. Clean labels stand in for the ground truth and the per-example
  feature law is shared by construction;
* a plain sequence of :class:`~noisyfed.data.LabeledDataset` for the risk
  functions, where the expectation is the mean loss.

Client weights default to ``n_k / n`` for datasets and to uniform for grid
worlds (which model equal-size clients).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import LabeledDataset
from .errors import AssumptionViolation, DomainError, ShapeError
from .grid import GridWorld
from .nn import ReluMlp, augment, forward_batch, log_sum_exp, path_norm_proxy, per_class_losses

BOUND_SLACK = 1e-9
OMEGA_VARIANTS = ("cf", "pnp", "poly")
_VARIANT_ALIASES = {"1": "cf", "2": "pnp", "3": "poly", "cf": "cf", "pnp": "pnp", "poly": "poly"}


@dataclass(frozen=True, eq=False)
class PairedShards:
    noisy: tuple[LabeledDataset, ...]
    clean: tuple[LabeledDataset, ...]

    def __post_init__(self):
        noisy, clean = tuple(self.noisy), tuple(self.clean)
        if len(noisy) != len(clean) or not noisy:
            raise ShapeError("need one clean shard per noisy shard")
        for k, (a, b) in enumerate(zip(noisy, clean)):
            if len(a) != len(b) or not np.array_equal(a.features, b.features):
                raise ShapeError(f"client {k}: noisy and clean shards hold different examples")
        object.__setattr__(self, "noisy", noisy)
        object.__setattr__(self, "clean", clean)

    @property
    def n_clients(self) -> int:
        return len(self.noisy)

    def sizes(self) -> np.ndarray:
        return np.array([len(d) for d in self.noisy], dtype=np.float64)


def _n_clients(source) -> int:
    if isinstance(source, (GridWorld, PairedShards)):
        return source.n_clients
    return len(source)


def client_weights(source, weights: Sequence[float] | None = None) -> np.ndarray:
    n = _n_clients(source)
    if weights is None:
        if isinstance(source, GridWorld):
            return np.full(n, 1.0 / n)
        sizes = source.sizes() if isinstance(source, PairedShards) else np.array([len(d) for d in source], float)
        return sizes / sizes.sum()
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise DomainError(f"expected {n} client weights, got {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise DomainError("client weights must be nonnegative and sum to 1")
    return w


def _grid_losses(model: ReluMlp, world: GridWorld) -> np.ndarray:
    return per_class_losses(forward_batch(model, augment(world.points)))


def _grid_expected(marginals: np.ndarray, tables: np.ndarray, losses: np.ndarray) -> np.ndarray:
    """Per-client ``sum_x Pr(x) sum_i Pr(i | x) loss(x, i)``; one code path for every label law."""
    return np.sum(marginals * np.sum(tables * losses[None], axis=2), axis=1)


def _mean_loss(model: ReluMlp, dataset: LabeledDataset) -> float:
    logits = forward_batch(model, augment(dataset.features))
    return float(np.mean(log_sum_exp(logits) - logits[np.arange(len(dataset)), dataset.labels]))


def empirical_risk(model: ReluMlp, source, weights: Sequence[float] | None = None) -> float:
    """Client-weighted expected loss under each client's (possibly noisy) law."""
    w = client_weights(source, weights)
    if isinstance(source, GridWorld):
        return float(w @ _grid_expected(source.marginals, source.client_tables, _grid_losses(model, source)))
    shards = source.noisy if isinstance(source, PairedShards) else source
    return float(w @ np.array([_mean_loss(model, d) for d in shards]))


def ground_truth_risk(model: ReluMlp, source, weights: Sequence[float] | None = None) -> float:
    """Client-weighted expected loss under the clean ground truth.

    For a plain sequence of datasets the sequence itself is taken as clean.
    """
    w = client_weights(source, weights)
    if isinstance(source, GridWorld):
        truth = np.broadcast_to(source.truth_table, source.client_tables.shape)
        return float(w @ _grid_expected(source.marginals, truth, _grid_losses(model, source)))
    shards = source.clean if isinstance(source, PairedShards) else source
    return float(w @ np.array([_mean_loss(model, d) for d in shards]))


def generalization_error(model: ReluMlp, source, weights: Sequence[float] | None = None) -> float:
    return abs(ground_truth_risk(model, source, weights) - empirical_risk(model, source, weights))


def _grid_noise_term(world: GridWorld, w: np.ndarray) -> float:
    gap = np.abs(world.truth_table[None] - world.client_tables).sum(axis=2)  # (N, P)
    return float(np.sum(w[:, None] * world.marginals * gap))


def noise_expectation_term(source, weights: Sequence[float] | None = None) -> float:
    """``E_X[sum_i sum_k (n_k/n) |Pr_mu(Y=i|X) - Pr_pi_k(Y=i|X)|]``.

    On paired shards the per-example law is a point mass, so each mislabelled
    example contributes 2 and the term is ``sum_k w_k * 2 * (flipped_k / n_k)``.
    Raises :class:`AssumptionViolation` when grid clients see different
    feature marginals.
    """
    w = client_weights(source, weights)
    if isinstance(source, GridWorld):
        if not source.shares_marginal():
            raise AssumptionViolation("client feature marginals differ")
        return _grid_noise_term(source, w)
    if isinstance(source, PairedShards):
        frac = np.array([np.mean(a.labels != b.labels) for a, b in zip(source.noisy, source.clean)])
        return float(w @ (2.0 * frac))
    raise TypeError(f"unsupported source {type(source).__name__}")


def evaluation_inputs(source) -> np.ndarray:
    if isinstance(source, GridWorld):
        return augment(source.points)
    if isinstance(source, PairedShards):
        return augment(np.vstack([d.features for d in source.noisy]))
    return augment(np.vstack([d.features for d in source]))


def measured_output_bound(model: ReluMlp, source) -> float:
    """Largest absolute logit over the evaluation points (the constant ``C_f``)."""
    return float(np.max(np.abs(forward_batch(model, evaluation_inputs(source)))))


@dataclass(frozen=True)
class BoundReport:
    variant: str
    expectation: float
    omega: float
    bound: float
    observed: float
    holds: bool
    assumption_holds: bool = True


def normalize_variant(variant) -> str:
    key = str(variant).lower()
    if key not in _VARIANT_ALIASES:
        raise DomainError(f"unknown omega variant {variant!r}; expected one of {OMEGA_VARIANTS}")
    return _VARIANT_ALIASES[key]


def omega_value(model: ReluMlp, source, variant: str, c0: float = 1.0,
                round_index: int | None = None, epochs: int | None = None) -> float:
    variant = normalize_variant(variant)
    if variant == "cf":
        return measured_output_bound(model, source)
    if variant == "pnp":
        return path_norm_proxy(model)
    if round_index is None or epochs is None:
        raise DomainError("the polynomial omega needs round_index and epochs")
    return float(c0) * float(round_index) ** (epochs * model.hidden_layers)


def theorem1_bound(model: ReluMlp, source, weights: Sequence[float] | None = None, variant="pnp",
                   c0: float = 1.0, round_index: int | None = None, epochs: int | None = None) -> BoundReport:
    """Compare the observed generalization error with ``omega * noise term``.

    A grid world that breaks the shared-marginal assumption is flagged in
    ``assumption_holds`` rather than rejected; its term then uses each
    client's own marginal.
    """
    variant = normalize_variant(variant)
    w = client_weights(source, weights)
    assumption = not isinstance(source, GridWorld) or source.shares_marginal()
    if isinstance(source, GridWorld) and not assumption:
        term = _grid_noise_term(source, w)
    else:
        term = noise_expectation_term(source, w)
    omega = omega_value(model, source, variant, c0, round_index, epochs)
    bound = omega * term
    observed = generalization_error(model, source, w)
    return BoundReport(variant, term, omega, bound, observed, bool(observed <= bound + BOUND_SLACK), assumption)


def lemma1_identity_check(model: ReluMlp, world: GridWorld, client: int | None = None) -> tuple[float, float, float]:
    """Expected cross-entropy two ways: directly, and via the class-conditional expansion.

    ``client=None`` uses the ground-truth law, otherwise client ``client``'s.
    Classes with zero probability are skipped on the expansion side.
    """
    table = world.truth_table if client is None else world.client_tables[client]
    marg = world.marginals[0 if client is None else client]
    logits = forward_batch(model, augment(world.points))
    lse = log_sum_exp(logits)
    joint = marg[:, None] * table  # Pr(x, y = i)

    lhs = float(np.sum(joint * (lse[:, None] - logits)))

    rhs = 0.0
    for i in range(world.class_count):
        p_class = float(joint[:, i].sum())
        if p_class == 0.0:
            continue
        cond = joint[:, i] / p_class  # Pr(x | y = i)
        rhs -= p_class * float(np.sum(cond * (logits[:, i] - lse)))
    return lhs, rhs, abs(lhs - rhs)


def expected_accuracy(model: ReluMlp, world: GridWorld) -> float:
    """Probability under the ground truth that the argmax class is correct."""
    pred = np.argmax(forward_batch(model, augment(world.points)), axis=1)
    return float(np.sum(world.marginal * world.truth_table[np.arange(world.n_points), pred]))


# ---------------------------------------------------------------------------
# fits


def _r_squared(y: np.ndarray, fitted: np.ndarray) -> float:
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 0.0
    return 1.0 - float(np.sum((y - fitted) ** 2)) / ss_tot


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    offset: float
    r_squared: float

    def predict(self, t) -> np.ndarray:
        return np.exp(self.offset) * np.asarray(t, dtype=float) ** self.exponent


def fit_pathnorm_growth(rounds: Sequence[float], values: Sequence[float]) -> PowerLawFit:
    """Least squares for ``log pnp = a * log t + b``."""
    t = np.asarray(rounds, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if t.shape != v.shape or t.size < 3:
        raise DomainError("need at least three (round, value) pairs")
    if np.any(t < 1) or np.any(v <= 0):
        raise DomainError("rounds must be >= 1 and values > 0")
    x, y = np.log(t), np.log(v)
    design = np.column_stack([x, np.ones_like(x)])
    if np.ptp(y) == 0.0:
        return PowerLawFit(0.0, float(y[0]), 0.0)
    (a, b), *_ = np.linalg.lstsq(design, y, rcond=None)
    return PowerLawFit(float(a), float(b), _r_squared(y, design @ np.array([a, b])))


@dataclass(frozen=True)
class RegressionFit:
    design: tuple[tuple[float, ...], ...]
    responses: tuple[float, ...]
    coefficients: tuple[float, ...]  # intercept first
    r_squared: float

    @property
    def intercept(self) -> float:
        return self.coefficients[0]

    @property
    def slopes(self) -> tuple[float, ...]:
        return self.coefficients[1:]

    def predict(self, wp: Sequence[float]) -> float:
        return float(self.coefficients[0] + np.dot(self.coefficients[1:], wp))

    def to_json_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "slopes": list(self.slopes),
            "r_squared": self.r_squared,
            "points": len(self.responses),
        }


def fit_accuracy_vs_noise(points: Sequence[tuple[Sequence[float], float]]) -> RegressionFit:
    """Least-squares plane ``accuracy ~ b0 + sum_k b_k * wp_k``."""
    design = np.array([np.asarray(wp, dtype=np.float64) for wp, _ in points], dtype=np.float64)
    y = np.array([acc for _, acc in points], dtype=np.float64)
    if design.ndim != 2:
        raise DomainError("every point needs a noise vector of the same length")
    dim = design.shape[1]
    if len(y) < dim + 2:
        raise DomainError(f"need at least {dim + 2} points for {dim} noise levels")
    if np.ptp(y) == 0.0:
        coef = np.zeros(dim + 1)
        coef[0] = y[0]
        r2 = 0.0
    else:
        full = np.column_stack([np.ones(len(y)), design])
        coef, *_ = np.linalg.lstsq(full, y, rcond=None)
        r2 = _r_squared(y, full @ coef)
    return RegressionFit(tuple(map(tuple, design.tolist())), tuple(y.tolist()),
                         tuple(float(c) for c in coef), r2)


# ---------------------------------------------------------------------------
# per-round record


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    client_losses: tuple[float, ...]
    test_accuracy: float
    empirical_risk: float
    ground_truth_risk: float
    generalization_error: float
    path_norm: float
    bound: BoundReport | None = None

    @property
    def mean_client_loss(self) -> float:
        return float(np.mean(self.client_losses))


class RoundEvaluator:
    """Callable computing :class:`RoundMetrics` for the global model after a round.

    ``test`` is a clean held-out dataset; for grid worlds it may be omitted and
    accuracy is then the exact expected accuracy under the ground truth.
    """

    def __init__(self, source, test: LabeledDataset | None = None, weights=None,
                 variant: str = "pnp", c0: float = 1.0, epochs: int | None = None):
        if test is None and not isinstance(source, GridWorld):
            raise DomainError("a held-out test set is required for dataset sources")
        self.source = source
        self.test = test
        self.weights = client_weights(source, weights)
        self.variant = normalize_variant(variant)
        self.c0 = c0
        self.epochs = epochs

    def accuracy(self, model: ReluMlp) -> float:
        if self.test is None:
            return expected_accuracy(model, self.source)
        logits = forward_batch(model, augment(self.test.features))
        return float(np.mean(np.argmax(logits, axis=1) == self.test.labels))

    def __call__(self, round_index: int, model: ReluMlp, client_losses: Sequence[float]) -> RoundMetrics:
        report = theorem1_bound(model, self.source, self.weights, self.variant, self.c0,
                                round_index=round_index, epochs=self.epochs)
        risk = empirical_risk(model, self.source, self.weights)
        truth = ground_truth_risk(model, self.source, self.weights)
        return RoundMetrics(
            round=round_index,
            client_losses=tuple(float(x) for x in client_losses),
            test_accuracy=self.accuracy(model),
            empirical_risk=risk,
            ground_truth_risk=truth,
            generalization_error=abs(truth - risk),
            path_norm=path_norm_proxy(model),
            bound=report,
        )

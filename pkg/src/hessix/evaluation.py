"""Experiment harness: synthetic regression simulator with known interacting
pairs, interaction injection, permutation null distributions, ROC scoring,
and an L1 products-regression baseline.

The functional form of each simulated interaction is experiment
configuration, not a fixed truth: the harness ships a small library of forms
with analytic mixed partials so detected effects can be compared against the
generative mechanism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import RngStream
from .data import Dataset, split_three
from .interactions import (
    InteractionEstimate,
    all_pairs,
    estimates_from_samples,
    mc_effect_samples,
    partition_kmeans,
    significance,
)
from .train import TrainConfig, train_model


# --- interaction form library -----------------------------------------------

@dataclass(frozen=True)
class FormSpec:
    """A bivariate interaction shape with its analytic mixed partial."""

    name: str
    fn: callable
    mixed_partial: callable


def _division_c(c=2.0):
    return FormSpec(
        "division",
        lambda a, b: a / (b + c),
        lambda a, b: -1.0 / (b + c) ** 2)


FORM_LIBRARY = {
    "product": FormSpec("product", lambda a, b: a * b,
                        lambda a, b: np.ones_like(a)),
    "exp_sum": FormSpec("exp_sum", lambda a, b: np.exp(a + b),
                        lambda a, b: np.exp(a + b)),
    "division": _division_c(2.0),
    "maximum": FormSpec("maximum", lambda a, b: np.maximum(a, b),
                        lambda a, b: np.zeros_like(a)),  # zero a.e.
    "sin_pi_prod": FormSpec("sin_pi_prod", lambda a, b: np.sin(np.pi * a) * b,
                            lambda a, b: np.pi * np.cos(np.pi * a)),
    "sum_square": FormSpec("sum_square", lambda a, b: (a + b) ** 2,
                           lambda a, b: np.full_like(a, 2.0)),
    "abs_diff": FormSpec("abs_diff", lambda a, b: np.abs(a - b),
                         lambda a, b: np.zeros_like(a)),  # zero a.e.
    "square_product": FormSpec("square_product", lambda a, b: a ** 2 * b ** 2,
                               lambda a, b: 4.0 * a * b),
}


@dataclass(frozen=True)
class InteractionTerm:
    form: str
    i: int
    j: int
    weight: float = 1.0

    def __post_init__(self):
        if self.form not in FORM_LIBRARY:
            raise ValueError(f"unknown interaction form {self.form!r}; "
                             f"available: {sorted(FORM_LIBRARY)}")
        if self.i == self.j:
            raise ValueError("interaction needs two distinct features")


@dataclass
class SyntheticSpec:
    """Generative recipe: linear main effects plus bivariate interaction terms.

    `ranges[j]` is (low, high) for uniform sampling or (mean, std) when
    `feature_sampling` is "normal".  Noise variance is set from the realized
    signal variance and the requested signal-to-noise ratio, unless a fixed
    `noise_sigma` is given.
    """

    n_train: int = 20000
    n_val: int = 5000
    n_test: int = 5000
    main_weights: list = field(default_factory=lambda: [1.0] * 8)
    interactions: list = field(default_factory=list)
    ranges: list = field(default_factory=list)
    snr: float = 4.0
    noise_sigma: float | None = None
    feature_sampling: str = "uniform"
    pure_noise: bool = False

    def __post_init__(self):
        if not self.ranges:
            self.ranges = [_EQ8_RANGES[j % 8] for j in range(self.d)]
        if len(self.ranges) != self.d:
            raise ValueError("one range per feature required")
        if self.feature_sampling not in ("uniform", "normal"):
            raise ValueError("feature_sampling must be 'uniform' or 'normal'")
        for term in self.interactions:
            if not (0 <= term.i < self.d and 0 <= term.j < self.d):
                raise ValueError(f"interaction {term} outside feature range")

    @property
    def d(self) -> int:
        return len(self.main_weights)


_EQ8_RANGES = [(0.5, 1.5), (-0.5, 0.5), (0.5, 1.5), (-0.5, 0.5),
               (0.5, 1.5), (0.5, 1.5), (-0.5, 0.5), (0.5, 1.5)]

# default chain-pair form assignment: a mix of monotone shapes and three
# symmetric ones whose mixed partial integrates to zero over the box
# (slots 1, 3 and 6 start on a sign-symmetric feature)
_EQ8_FORMS = ["product", "square_product", "exp_sum", "square_product",
              "sum_square", "division", "square_product"]


def eq8_spec(snr: float = 4.0, n_train: int = 20000, n_val: int = 5000,
             n_test: int = 5000, interaction_weight: float = 1.0,
             forms: list | None = None) -> SyntheticSpec:
    """Eight features, seven chained interacting pairs."""
    forms = list(forms) if forms is not None else list(_EQ8_FORMS)
    if len(forms) != 7:
        raise ValueError("need exactly 7 forms for the chained pairs")
    terms = [InteractionTerm(forms[k], k, k + 1, interaction_weight)
             for k in range(7)]
    return SyntheticSpec(n_train=n_train, n_val=n_val, n_test=n_test,
                         main_weights=[1.0] * 8, interactions=terms,
                         ranges=list(_EQ8_RANGES), snr=snr)


# weights putting every chained term at variance ~0.15 on the default box
# (the raw forms differ by more than two orders of magnitude)
_EQ8_BALANCED_WEIGHTS = [1.29, 3.75, 0.32, 3.75, 0.24, 2.32, 3.73]


def balanced_eq8_spec(snr: float = 4.0, n_train: int = 20000, n_val: int = 5000,
                      n_test: int = 5000) -> SyntheticSpec:
    """Eq8-style recipe with per-term weights equalizing signal variance."""
    terms = [InteractionTerm(_EQ8_FORMS[k], k, k + 1, _EQ8_BALANCED_WEIGHTS[k])
             for k in range(7)]
    return SyntheticSpec(n_train=n_train, n_val=n_val, n_test=n_test,
                         main_weights=[1.0] * 8, interactions=terms,
                         ranges=list(_EQ8_RANGES), snr=snr)


def multiplicative_pair_spec(b12: float = 2.0, snr: float | None = 4.0,
                             noise_sigma: float | None = None,
                             n_train: int = 5000, n_val: int = 1000,
                             n_test: int = 1000) -> SyntheticSpec:
    """Two standard-normal features with main effects 1 and one product term."""
    return SyntheticSpec(
        n_train=n_train, n_val=n_val, n_test=n_test,
        main_weights=[1.0, 1.0],
        interactions=[InteractionTerm("product", 0, 1, b12)],
        ranges=[(0.0, 1.0), (0.0, 1.0)], snr=snr if snr is not None else 1.0,
        noise_sigma=noise_sigma, feature_sampling="normal")


@dataclass
class GroundTruth:
    pairs: set

    @classmethod
    def from_spec(cls, spec: SyntheticSpec) -> "GroundTruth":
        return cls({tuple(sorted((t.i, t.j))) for t in spec.interactions
                    if t.weight != 0.0})


def signal_values(spec: SyntheticSpec, x: np.ndarray) -> np.ndarray:
    signal = x @ np.asarray(spec.main_weights, dtype=float)
    for t in spec.interactions:
        form = FORM_LIBRARY[t.form]
        signal = signal + t.weight * form.fn(x[:, t.i], x[:, t.j])
    return signal


def signal_mixed_partials(spec: SyntheticSpec, x: np.ndarray) -> np.ndarray:
    """Analytic (N, D, D) off-diagonal Hessian of the generative signal."""
    n = x.shape[0]
    h = np.zeros((n, spec.d, spec.d))
    for t in spec.interactions:
        form = FORM_LIBRARY[t.form]
        vals = t.weight * form.mixed_partial(x[:, t.i], x[:, t.j])
        h[:, t.i, t.j] += vals
        h[:, t.j, t.i] += vals
    return h


def simulate(spec: SyntheticSpec, rng: RngStream):
    """Draw (train, val, test, GroundTruth) datasets from the recipe."""
    n = spec.n_train + spec.n_val + spec.n_test
    gen = rng.generator()
    cols = []
    for lo, hi in spec.ranges:
        if spec.feature_sampling == "uniform":
            cols.append(gen.uniform(lo, hi, size=n))
        else:
            cols.append(gen.normal(lo, hi, size=n))
    x = np.column_stack(cols)
    if spec.pure_noise:
        y = gen.normal(0.0, 1.0, size=n)
        truth = GroundTruth(set())
    else:
        signal = signal_values(spec, x)
        if spec.noise_sigma is not None:
            sigma = float(spec.noise_sigma)
        else:
            if spec.snr <= 0.0:
                raise ValueError(
                    "signal-to-noise ratio must be positive (noise variance "
                    "would be infinite); set pure_noise for a no-signal draw")
            sigma = math.sqrt(float(np.var(signal)) / spec.snr)
        y = signal + sigma * gen.normal(size=n)
        truth = GroundTruth.from_spec(spec)
    names = [f"x{i + 1}" for i in range(spec.d)]
    full = Dataset(x, y, names)
    train = full.subset(slice(0, spec.n_train))
    val = full.subset(slice(spec.n_train, spec.n_train + spec.n_val))
    test = full.subset(slice(spec.n_train + spec.n_val, n))
    return train, val, test, truth


# --- interaction injection ----------------------------------------------------

INJECTION_FORMS = ("multiplicative", "exponential", "division")


def inject_interaction(dataset: Dataset, form: str, pair, strength: float,
                       division_offset: float | None = None) -> Dataset:
    """Add one synthetic interaction to the target: y + strength * h(x_i, x_j)."""
    i, j = pair
    if not (0 <= i < dataset.d and 0 <= j < dataset.d and i != j):
        raise ValueError(f"invalid feature pair {pair}")
    xi, xj = dataset.x[:, i], dataset.x[:, j]
    if form == "multiplicative":
        extra = xi * xj
    elif form == "exponential":
        extra = np.exp(np.clip(xi + xj, -10.0, 10.0))
    elif form == "division":
        c = division_offset
        if c is None:
            c = 0.5 - float(np.min(xj))  # guarantees x_j + c >= 0.5
        if np.min(np.abs(xj + c)) < 0.5:
            raise ValueError("division offset leaves |x_j + c| below 0.5")
        extra = xi / (xj + c)
    else:
        raise ValueError(f"unknown injection form {form!r}; "
                         f"choose from {INJECTION_FORMS}")
    return dataset.with_target(dataset.y + strength * extra)


# --- detection pipeline --------------------------------------------------------

MEASURES = ("aeh", "geh", "eah")  # pooled / grouped / ungrouped aggregation


@dataclass
class PipelineConfig:
    """Train-plus-detect bundle used by the experiment protocols."""

    train: TrainConfig = field(default_factory=TrainConfig)
    clusters: int = 10
    mc_samples: int = 50
    layer: int = 0


@dataclass
class PipelineResult:
    model: object
    estimates: dict  # measure -> list[InteractionEstimate]
    samples: dict  # measure -> (K, L) effect draws
    pairs: list


def run_pipeline(train: Dataset, val: Dataset, config: PipelineConfig,
                 rng: RngStream, measures=MEASURES) -> PipelineResult:
    """Train the hybrid model and aggregate its Hessian field three ways."""
    model, _ = train_model(train, val, config.train)
    points = model.x_standardizer.apply(train.x)
    n = points.shape[0]
    cluster_counts = {"aeh": 1, "geh": min(config.clusters, n), "eah": n}
    partitions = {m: partition_kmeans(points, cluster_counts[m],
                                      rng.substream(17).substream(cluster_counts[m]))
                  for m in measures}
    pairs = all_pairs(train.d)
    samples = mc_effect_samples(model, points, partitions, config.mc_samples,
                                rng.substream(23), pairs, config.layer)
    estimates = {m: estimates_from_samples(samples[m], pairs, train.feature_names)
                 for m in measures}
    return PipelineResult(model=model, estimates=estimates, samples=samples,
                          pairs=pairs)


def significant_fraction(estimates: list) -> float:
    return float(np.mean([significance(e) for e in estimates]))


def p_permute_value(observed_score: float, null_max_scores: np.ndarray) -> float:
    """(1 + #{null max >= s}) / (P + 1): family-wise permutation p-value."""
    null_max_scores = np.asarray(null_max_scores, dtype=float)
    return float((1 + np.sum(null_max_scores >= observed_score))
                 / (null_max_scores.size + 1))


@dataclass
class PermutationNullResult:
    observed: dict  # measure -> estimates on the unpermuted data
    fpr: dict  # measure -> mean significant fraction across permutations
    null_max: dict  # measure -> (P,) max observed effect per permutation
    p_permute: dict  # measure -> {pair: p-value} for the observed estimates


def permutation_null(dataset: Dataset, config: PipelineConfig,
                     n_permutations: int, rng: RngStream,
                     measures=MEASURES) -> PermutationNullResult:
    """Retrain-and-detect on target-shuffled copies of the data.

    Every interaction in a permuted dataset is false, so the significant
    fraction estimates the false-positive rate of each measure, and the max
    effect across pairs builds the null for family-wise permutation p-values.
    """
    if n_permutations < 1:
        raise ValueError("need at least one permutation")
    observed = run_pipeline(*_pipeline_split(dataset, rng.substream(0)),
                            config, rng.substream(1), measures)
    fpr_acc = {m: [] for m in measures}
    null_max = {m: np.empty(n_permutations) for m in measures}
    for p in range(n_permutations):
        perm_rng = rng.substream(100 + p)
        y_perm = perm_rng.generator().permutation(dataset.y)
        perm_ds = dataset.with_target(y_perm)
        cfg = replace(config, train=replace(config.train,
                                            seed=config.train.seed + 7919 * (p + 1)))
        result = run_pipeline(*_pipeline_split(perm_ds, perm_rng.substream(1)),
                              cfg, perm_rng.substream(2), measures)
        for m in measures:
            fpr_acc[m].append(significant_fraction(result.estimates[m]))
            null_max[m][p] = max(e.mean for e in result.estimates[m])
    fpr = {m: float(np.mean(fpr_acc[m])) for m in measures}
    p_perm = {m: {e.pair: p_permute_value(e.mean, null_max[m])
                  for e in observed.estimates[m]} for m in measures}
    return PermutationNullResult(observed=observed.estimates, fpr=fpr,
                                 null_max=null_max, p_permute=p_perm)


def _pipeline_split(dataset: Dataset, rng: RngStream):
    train, val, _ = split_three(dataset, 0.7, 0.2, rng)
    return train, val


# --- ROC ----------------------------------------------------------------------

@dataclass(frozen=True)
class RocPoint:
    threshold: float
    fpr: float
    tpr: float


@dataclass
class RocCurve:
    points: list
    auc: float


def _z_score(e: InteractionEstimate) -> float:
    sd = math.sqrt(e.variance)
    if sd > 0.0:
        return e.mean / sd
    return math.inf if e.mean > 0.0 else 0.0


def roc_curve(per_dataset_estimates: list, truths: list) -> RocCurve:
    """Sweep the credible-interval multiplier and score against ground truth.

    A pair is flagged when mean - multiplier * sd > 0, so the sweep reduces
    to thresholding the mean/sd ratio.  Estimates from all datasets are
    pooled; each dataset contributes its own truth set.
    """
    if len(per_dataset_estimates) != len(truths):
        raise ValueError("one truth set per dataset required")
    scores, labels = [], []
    for ests, truth in zip(per_dataset_estimates, truths):
        pairs = truth.pairs if isinstance(truth, GroundTruth) else set(truth)
        for e in ests:
            scores.append(_z_score(e))
            labels.append(tuple(sorted(e.pair)) in pairs)
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both true and false pairs in the truth")
    points = [RocPoint(math.inf, 0.0, 0.0)]
    for t in sorted(set(scores), reverse=True):
        flag = scores >= t
        points.append(RocPoint(float(t),
                               float(np.sum(flag & ~labels)) / n_neg,
                               float(np.sum(flag & labels)) / n_pos))
    if points[-1].fpr < 1.0 or points[-1].tpr < 1.0:
        points.append(RocPoint(-math.inf, 1.0, 1.0))
    xs = np.array([p.fpr for p in points])
    ys = np.array([p.tpr for p in points])
    auc = float(np.sum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs)))
    return RocCurve(points=points, auc=auc)


# --- L1 products baseline -------------------------------------------------------

@dataclass
class LassoBaselineResult:
    ranked_pairs: list  # pairs ordered best-first by |standardized coefficient|
    pair_coef_raw: dict
    pair_coef_std: dict
    main_coef_raw: np.ndarray
    intercept: float
    lam: float


def lasso_products_baseline(dataset: Dataset, lam: float, max_iter: int = 5000,
                            tol: float = 1e-10) -> LassoBaselineResult:
    """Coordinate-descent L1 regression on [features + all pairwise products].

    Columns are standardized, the target centered; the objective is
    (1/2N) ||y - Zw||^2 + lam * ||w||_1.  Pairs are ranked by the magnitude
    of their product-term coefficient.
    """
    if lam < 0:
        raise ValueError("penalty must be nonnegative")
    pairs = all_pairs(dataset.d)
    cols = [dataset.x[:, k] for k in range(dataset.d)]
    cols += [dataset.x[:, i] * dataset.x[:, j] for i, j in pairs]
    z = np.column_stack(cols)
    mu = z.mean(axis=0)
    sd = z.std(axis=0)
    sd = np.where(sd == 0.0, 1.0, sd)
    z = (z - mu) / sd
    y = dataset.y - dataset.y.mean()
    n, p = z.shape

    w = np.zeros(p)
    resid = y.copy()
    for _ in range(max_iter):
        max_step = 0.0
        for k in range(p):
            wk = w[k]
            if wk != 0.0:
                resid += wk * z[:, k]
            rho = float(z[:, k] @ resid) / n
            w[k] = math.copysign(max(abs(rho) - lam, 0.0), rho)
            if w[k] != 0.0:
                resid -= w[k] * z[:, k]
            max_step = max(max_step, abs(w[k] - wk))
        if max_step < tol:
            break

    main_raw = w[:dataset.d] / sd[:dataset.d]
    pair_std = {pair: float(w[dataset.d + idx]) for idx, pair in enumerate(pairs)}
    pair_raw = {pair: float(w[dataset.d + idx] / sd[dataset.d + idx])
                for idx, pair in enumerate(pairs)}
    order = sorted(pairs, key=lambda pr: (-abs(pair_std[pr]), pr))
    intercept = float(dataset.y.mean() - (mu / sd) @ w)
    return LassoBaselineResult(ranked_pairs=order, pair_coef_raw=pair_raw,
                               pair_coef_std=pair_std, main_coef_raw=main_raw,
                               intercept=intercept, lam=lam)


def rank_of_truth(ranked_pairs: list, truth) -> list:
    """1-based position of each true pair inside a best-first ranking."""
    pairs = truth.pairs if isinstance(truth, GroundTruth) else set(truth)
    positions = {tuple(sorted(p)): idx + 1 for idx, p in enumerate(ranked_pairs)}
    out = []
    for pair in sorted(pairs):
        key = tuple(sorted(pair))
        if key not in positions:
            raise ValueError(f"true pair {key} missing from the ranking")
        out.append(positions[key])
    return out

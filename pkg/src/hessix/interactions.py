"""Aggregation of local second derivatives into global pairwise interaction
effects with Monte Carlo uncertainty.

For one weight draw (hard mask), the local Hessian field over the data is
grouped by an L2 k-means partition of the input space; each group
contributes the absolute value of its mean Hessian, weighted by group size.
One group per point keeps every local sign (lowest miss rate, most false
alarms); a single group cancels everything that changes sign (the reverse
trade-off); intermediate group counts interpolate.  Repeating over many
mask draws gives a posterior mean, variance, credible interval and one-sided
p-value per feature pair.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bnn import HybridModel, MaskSample, sample_mask
from .core import RngStream, norm_cdf
from .hessian import model_batch_hessian

CI_MULTIPLIER = 2.0  # 95% interval uses exactly +/- 2 posterior SDs


@dataclass
class Partition:
    """M centroids plus the nearest-centroid assignment of every data point."""

    centroids: np.ndarray  # (M, dim)
    assignment: np.ndarray  # (N,) ints in [0, M)
    sizes: np.ndarray  # (M,) ints

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=int)
        self.sizes = np.asarray(self.sizes, dtype=int)
        if self.sizes.sum() != self.assignment.size:
            raise ValueError("subregion sizes must sum to the point count")
        if np.any(self.sizes <= 0):
            raise ValueError("empty subregion after repair")

    @property
    def n_clusters(self) -> int:
        return len(self.sizes)

    @property
    def n_points(self) -> int:
        return self.assignment.size


def _kmeans_pp_seeds(x: np.ndarray, m: int, gen: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((m, x.shape[1]))
    centroids[0] = x[gen.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for k in range(1, m):
        total = d2.sum()
        if total <= 0.0:
            idx = gen.integers(n)  # duplicate points: fall back to uniform
        else:
            idx = int(np.searchsorted(np.cumsum(d2), gen.uniform() * total))
            idx = min(idx, n - 1)
        centroids[k] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centroids[k]) ** 2, axis=1))
    return centroids


def _assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (N, M) squared L2 distances without forming the difference tensor
    d2 = (np.sum(x * x, axis=1)[:, None] - 2.0 * x @ centroids.T
          + np.sum(centroids * centroids, axis=1)[None, :])
    return np.argmin(d2, axis=1)


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int) -> tuple:
    m = centroids.shape[0]
    assignment = _assign(x, centroids)
    for _ in range(max_iter):
        for k in range(m):
            members = assignment == k
            if members.any():
                centroids[k] = x[members].mean(axis=0)
            else:
                # repair: re-seed the empty cluster with the farthest point
                # of the currently largest cluster
                largest = np.bincount(assignment, minlength=m).argmax()
                pts = np.flatnonzero(assignment == largest)
                far = pts[np.argmax(np.sum((x[pts] - centroids[largest]) ** 2, axis=1))]
                centroids[k] = x[far]
        new_assignment = _assign(x, centroids)
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
    wcss = float(np.sum((x - centroids[assignment]) ** 2))
    return centroids, assignment, wcss


def partition_kmeans(x: np.ndarray, n_clusters: int, rng: RngStream,
                     restarts: int = 10, max_iter: int = 100) -> Partition:
    """L2 k-means with k-means++ seeding; best of `restarts` runs by WCSS.

    n_clusters == 1 and n_clusters == N short-circuit to the exact extreme
    partitions (single group / one group per point).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    if not (1 <= n_clusters <= n):
        raise ValueError(f"cluster count {n_clusters} out of range [1, {n}]")
    if n_clusters == 1:
        return Partition(centroids=x.mean(axis=0, keepdims=True),
                         assignment=np.zeros(n, dtype=int),
                         sizes=np.array([n]))
    if n_clusters == n:
        return Partition(centroids=x.copy(), assignment=np.arange(n),
                         sizes=np.ones(n, dtype=int))
    best = None
    for r in range(restarts):
        gen = rng.substream(r).generator()
        seeds = _kmeans_pp_seeds(x, n_clusters, gen)
        centroids, assignment, wcss = _lloyd(x, seeds, max_iter)
        if best is None or wcss < best[2]:
            best = (centroids, assignment, wcss)
    centroids, assignment, _ = best
    # final nearest-centroid pass defines the stored partition
    assignment = _assign(x, centroids)
    sizes = np.bincount(assignment, minlength=n_clusters)
    if np.any(sizes == 0):
        keep = sizes > 0  # drop clusters that lost every point on the last pass
        centroids = centroids[keep]
        assignment = _assign(x, centroids)
        sizes = np.bincount(assignment, minlength=centroids.shape[0])
    return Partition(centroids=centroids, assignment=assignment, sizes=sizes)


def all_pairs(n_features: int) -> list:
    return [(i, j) for i in range(n_features) for j in range(i + 1, n_features)]


def grouped_abs_mean(hessians: np.ndarray, partition: Partition) -> np.ndarray:
    """Size-weighted |group-mean| of a per-point matrix field -> (D, D)."""
    n = hessians.shape[0]
    if partition.n_points != n:
        raise ValueError("partition does not cover the evaluated points")
    out = np.zeros(hessians.shape[1:])
    for k in range(partition.n_clusters):
        members = partition.assignment == k
        out += (partition.sizes[k] / n) * np.abs(hessians[members].mean(axis=0))
    return out


def geh_single_sample(model: HybridModel, mask: MaskSample, partition: Partition,
                      points: np.ndarray, pairs=None, layer: int = 0) -> np.ndarray:
    """Effect vector for one weight draw: grouped |mean Hessian| per pair."""
    hess = model_batch_hessian(model, mask, points, layer)
    matrix = grouped_abs_mean(hess, partition)
    if pairs is None:
        pairs = all_pairs(matrix.shape[0])
    return np.array([matrix[i, j] for i, j in pairs])


@dataclass
class InteractionEstimate:
    """Posterior summary of one pair's global interaction effect."""

    i: int
    j: int
    mean: float
    variance: float
    ci_low: float
    ci_high: float
    p_bayes: float
    rank: int
    feature_names: tuple = ("", "")

    @property
    def pair(self) -> tuple:
        return (self.i, self.j)


def significance(estimate: InteractionEstimate) -> bool:
    """Significant iff the 95% credible interval excludes 0; the effect is an
    absolute value, so only the lower bound can decide."""
    return estimate.ci_low > 0.0


def _rank_descending(values: np.ndarray) -> np.ndarray:
    """Dense 1-based ranks by descending value; ties broken by pair order."""
    order = np.lexsort((np.arange(len(values)), -values))
    ranks = np.empty(len(values), dtype=int)
    ranks[order] = np.arange(1, len(values) + 1)
    return ranks


def estimates_from_samples(samples: np.ndarray, pairs, feature_names=None) -> list:
    """Posterior summaries from a (K, L) matrix of per-draw effect vectors."""
    samples = np.atleast_2d(samples)
    k = samples.shape[0]
    if k < 2:
        raise ValueError("need at least 2 Monte Carlo samples")
    mean = samples.mean(axis=0)
    variance = samples.var(axis=0, ddof=1)
    sd = np.sqrt(variance)
    ranks = _rank_descending(mean)
    out = []
    for idx, (i, j) in enumerate(pairs):
        if sd[idx] > 0.0:
            p = norm_cdf(-mean[idx] / sd[idx])
        else:
            p = 0.0 if mean[idx] > 0.0 else 0.5
        names = ((feature_names[i], feature_names[j]) if feature_names
                 else (f"x{i + 1}", f"x{j + 1}"))
        out.append(InteractionEstimate(
            i=i, j=j, mean=float(mean[idx]), variance=float(variance[idx]),
            ci_low=float(mean[idx] - CI_MULTIPLIER * sd[idx]),
            ci_high=float(mean[idx] + CI_MULTIPLIER * sd[idx]),
            p_bayes=float(p), rank=int(ranks[idx]), feature_names=names))
    return out


def mc_effect_samples(model: HybridModel, points: np.ndarray, partitions: dict,
                      n_samples: int, rng: RngStream, pairs=None,
                      layer: int = 0) -> dict:
    """Per-draw effect vectors for several partitions sharing the same masks.

    The Hessian field is computed once per mask and re-aggregated for every
    partition, so comparisons across cluster counts see identical weight
    draws.  Returns {label: (n_samples, L) array}.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 Monte Carlo samples")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if pairs is None:
        dim = model.net.layers[layer].in_width
        pairs = all_pairs(dim)
    out = {label: np.empty((n_samples, len(pairs))) for label in partitions}
    for k in range(n_samples):
        mask = sample_mask(model.net, rng.substream(k), mode="hard")
        hess = model_batch_hessian(model, mask, points, layer)
        for label, part in partitions.items():
            matrix = grouped_abs_mean(hess, part)
            out[label][k] = [matrix[i, j] for i, j in pairs]
    return out


def bayesian_geh(model: HybridModel, partition: Partition, points: np.ndarray,
                 n_samples: int, rng: RngStream, pairs=None, layer: int = 0,
                 feature_names=None) -> list:
    """Monte Carlo posterior of the grouped interaction effect per pair."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if pairs is None:
        dim = model.net.layers[layer].in_width
        pairs = all_pairs(dim)
    samples = mc_effect_samples(model, points, {"_": partition}, n_samples,
                                rng, pairs, layer)["_"]
    if feature_names is None and layer == 0:
        feature_names = model.feature_names
    return estimates_from_samples(samples, pairs, feature_names)


def unstandardized_estimates(estimates: list, model: HybridModel) -> list:
    """Map effects from the model's standardized scale to raw data units.

    A second derivative picks up one 1/std per differentiated feature and the
    target's std once, so each pair scales by std_y / (std_i * std_j).
    Ranks are recomputed: the scaling is pair-dependent.
    """
    if model.x_standardizer is None or model.y_standardizer is None:
        raise ValueError("model carries no standardizers")
    sx = model.x_standardizer.std
    sy = float(model.y_standardizer.std[0])
    scaled, means = [], []
    for e in estimates:
        s = sy / (sx[e.i] * sx[e.j])
        scaled.append((e, float(s)))
        means.append(e.mean * s)
    ranks = _rank_descending(np.asarray(means))
    out = []
    for idx, (e, s) in enumerate(scaled):
        out.append(InteractionEstimate(
            i=e.i, j=e.j, mean=e.mean * s, variance=e.variance * s * s,
            ci_low=e.ci_low * s, ci_high=e.ci_high * s, p_bayes=e.p_bayes,
            rank=int(ranks[idx]), feature_names=e.feature_names))
    return out


# --- cluster count selection ------------------------------------------------

def rank_weighted_distance(effects_prev: np.ndarray, effects_curr: np.ndarray) -> float:
    """Squared effect changes weighted by squared rank changes.

    Zero whenever no pair changes rank, however much the raw effects move;
    ranks are dense descending with ties broken by pair order.
    """
    a = np.asarray(effects_prev, dtype=float)
    b = np.asarray(effects_curr, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("effect vectors must be 1-D and equal length")
    ra = _rank_descending(a)
    rb = _rank_descending(b)
    return float(np.sum((b - a) ** 2 * (rb - ra) ** 2))


@dataclass
class MSelectionTrace:
    """Scan record: effects, ranks and consecutive distances per cluster count."""

    cluster_counts: list  # scanned M values (>= 2)
    deltas: list  # rank weighted distance at each scanned M vs M-1
    effects: dict  # M -> effect vector (posterior means)
    chosen: int
    tau: float

    def rows(self):
        return list(zip(self.cluster_counts, self.deltas))


def choose_m_from_deltas(cluster_counts, deltas, tau: float = 0.05) -> int:
    """Smallest scanned M whose tail of distances all sit within tau of the
    scan maximum (everything after M has settled)."""
    counts = list(cluster_counts)
    d = np.asarray(deltas, dtype=float)
    if len(counts) != d.size or d.size == 0:
        raise ValueError("cluster counts and distances must align")
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    threshold = tau * float(d.max())
    for pos in range(d.size):
        if np.all(d[pos:] <= threshold):
            return counts[pos]
    return counts[-1]


def select_m(model: HybridModel, points: np.ndarray, scan, n_samples: int,
             rng: RngStream, layer: int = 0, tau: float = 0.05,
             pairs=None) -> MSelectionTrace:
    """Scan contiguous cluster counts and pick where the ranking settles.

    All counts share the same mask draws and each count's partition, so the
    distance trace reflects only the effect of the grouping.
    """
    scan = sorted(set(int(m) for m in scan))
    if len(scan) < 1 or scan[0] < 2:
        raise ValueError("scan must contain cluster counts >= 2")
    if scan != list(range(scan[0], scan[-1] + 1)):
        raise ValueError("scan must be a contiguous integer range")
    counts = [scan[0] - 1] + scan  # need M-1 for the first distance
    points = np.atleast_2d(np.asarray(points, dtype=float))
    partitions = {m: partition_kmeans(points, m, rng.substream(10_000 + m))
                  for m in counts}
    samples = mc_effect_samples(model, points, partitions, n_samples,
                                rng.substream(1), pairs, layer)
    effects = {m: samples[m].mean(axis=0) for m in counts}
    deltas = [rank_weighted_distance(effects[m - 1], effects[m]) for m in scan]
    chosen = choose_m_from_deltas(scan, deltas, tau)
    return MSelectionTrace(cluster_counts=scan, deltas=deltas, effects=effects,
                           chosen=chosen, tau=tau)


# --- report I/O -------------------------------------------------------------

def estimates_to_records(estimates: list, p_permute: dict | None = None) -> list:
    records = []
    for e in sorted(estimates, key=lambda e: e.rank):
        rec = {
            "pair": [e.i, e.j],
            "features": list(e.feature_names),
            "mean": e.mean,
            "variance": e.variance,
            "ci_low": e.ci_low,
            "ci_high": e.ci_high,
            "p_bayes": e.p_bayes,
            "rank": e.rank,
            "significant": significance(e),
        }
        if p_permute is not None:
            rec["p_permute"] = p_permute.get((e.i, e.j))
        records.append(rec)
    return records


def write_report_json(estimates: list, path, meta: dict | None = None,
                      p_permute: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"meta": meta or {}, "interactions": estimates_to_records(estimates, p_permute)}
    path.write_text(json.dumps(doc, sort_keys=True, indent=1), encoding="utf-8")


def write_report_csv(estimates: list, path, meta: dict | None = None,
                     p_permute: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = estimates_to_records(estimates, p_permute)
    cols = ["rank", "feature_i", "feature_j", "mean", "variance", "ci_low",
            "ci_high", "p_bayes", "significant"]
    if p_permute is not None:
        cols.append("p_permute")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if meta:
            for k in sorted(meta):
                fh.write(f"# {k}={meta[k]}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for r in records:
            row = [r["rank"], r["features"][0], r["features"][1],
                   repr(r["mean"]), repr(r["variance"]), repr(r["ci_low"]),
                   repr(r["ci_high"]), repr(r["p_bayes"]), r["significant"]]
            if p_permute is not None:
                row.append("" if r["p_permute"] is None else repr(r["p_permute"]))
            w.writerow(row)


def write_selection_csv(trace: MSelectionTrace, path, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if meta:
            for k in sorted(meta):
                fh.write(f"# {k}={meta[k]}\n")
        w = csv.writer(fh)
        w.writerow(["m", "delta_sq"])
        for m, d in trace.rows():
            w.writerow([m, repr(float(d))])

import numpy as np
import pytest

from hessix.bnn import (
    ConcreteDropoutMLP,
    HybridModel,
    LayerSpec,
    MaskSample,
    ones_gates,
    sample_mask,
)
from hessix.core import RngStream
from hessix.hessian import model_batch_hessian
from hessix.interactions import (
    InteractionEstimate,
    all_pairs,
    bayesian_geh,
    choose_m_from_deltas,
    estimates_from_samples,
    geh_single_sample,
    grouped_abs_mean,
    mc_effect_samples,
    partition_kmeans,
    rank_weighted_distance,
    select_m,
    significance,
    write_report_json,
    write_selection_csv,
)


def test_kmeans_single_cluster_is_mean():
    x = RngStream(1).generator().normal(size=(50, 3))
    part = partition_kmeans(x, 1, RngStream(2))
    np.testing.assert_allclose(part.centroids[0], x.mean(axis=0), atol=1e-12)
    assert part.sizes.tolist() == [50]


def test_kmeans_two_blobs_pure():
    gen = RngStream(3).generator()
    a = gen.normal(size=(60, 2)) * 0.3 + np.array([5.0, 0.0])
    b = gen.normal(size=(40, 2)) * 0.3 + np.array([-5.0, 0.0])
    x = np.vstack([a, b])
    part = partition_kmeans(x, 2, RngStream(4))
    labels_a = part.assignment[:60]
    labels_b = part.assignment[60:]
    assert len(set(labels_a)) == 1 and len(set(labels_b)) == 1
    assert labels_a[0] != labels_b[0]
    assert sorted(part.sizes.tolist()) == [40, 60]


def test_kmeans_one_cluster_per_point():
    x = RngStream(5).generator().normal(size=(12, 2))
    part = partition_kmeans(x, 12, RngStream(6))
    assert np.all(part.sizes == 1)
    assert part.n_clusters == 12


def test_kmeans_rejects_bad_cluster_count():
    x = np.zeros((5, 2))
    with pytest.raises(ValueError):
        partition_kmeans(x, 6, RngStream(0))
    with pytest.raises(ValueError):
        partition_kmeans(x, 0, RngStream(0))


def test_grouped_abs_mean_constant_field():
    field = np.full((30, 2, 2), 0.0)
    field[:, 0, 1] = field[:, 1, 0] = -3.7
    x = RngStream(7).generator().normal(size=(30, 2))
    for m in (1, 4, 30):
        part = partition_kmeans(x, m, RngStream(8))
        out = grouped_abs_mean(field, part)
        assert out[0, 1] == pytest.approx(3.7, abs=1e-12)


def product_square_model():
    """Interaction head computing exactly (x1*x2)^2, so H12 = 4*x1*x2."""
    specs = [LayerSpec(2, 2, "square"), LayerSpec(2, 1, "square"),
             LayerSpec(1, 1, "identity")]
    weights = [np.array([[1.0, 1.0], [1.0, -1.0]]),
               np.array([[0.25], [-0.25]]),
               np.array([[1.0]])]
    biases = [np.zeros(2), np.zeros(1), np.zeros(1)]
    logits = [np.full(2, -10.0), np.full(2, -10.0), np.full(1, -10.0)]
    net = ConcreteDropoutMLP(layers=specs, weights=weights, biases=biases,
                             gate_logits=logits)
    return HybridModel(beta=np.zeros(2), intercept=0.0, net=net)


def test_grouping_extremes_against_grid_integration():
    # local interaction H12(x) = 4*x1*x2 on a (-1,1)^2 grid: one global group
    # cancels it to ~0; one group per point integrates |H| to ~1
    model = product_square_model()
    mask = MaskSample(gates=ones_gates(model.net), mode="hard")
    g = np.linspace(-1 + 1 / 200, 1 - 1 / 200, 200)
    xx, yy = np.meshgrid(g, g)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    oracle_field = 4.0 * pts[:, 0] * pts[:, 1]  # analytic mixed partial
    oracle_eah = np.mean(np.abs(oracle_field))
    oracle_aeh = abs(np.mean(oracle_field))
    assert oracle_eah == pytest.approx(1.0, abs=0.01)
    assert oracle_aeh < 1e-12

    part1 = partition_kmeans(pts, 1, RngStream(9))
    partn = partition_kmeans(pts, len(pts), RngStream(9))
    e1 = geh_single_sample(model, mask, part1, pts)[0]
    en = geh_single_sample(model, mask, partn, pts)[0]
    assert e1 == pytest.approx(oracle_aeh, abs=1e-9)
    assert en == pytest.approx(oracle_eah, abs=1e-9)


def random_model(seed, d=4, hidden=(6, 5)):
    net = ConcreteDropoutMLP.create(d, list(hidden), RngStream(seed),
                                    init_drop_probability=0.15)
    return HybridModel(beta=np.zeros(d), intercept=0.0, net=net)


def test_exact_reductions_per_mask():
    # grouped effect with one group == |mean H|; with N groups == mean |H|
    for seed in range(6):
        d = 2 + seed % 3
        model = random_model(seed, d=d)
        n = 40 + 10 * seed
        x = RngStream(100 + seed).generator().normal(size=(n, d))
        part1 = partition_kmeans(x, 1, RngStream(0))
        partn = partition_kmeans(x, n, RngStream(0))
        for k in range(3):
            mask = sample_mask(model.net, RngStream(200 + seed, (k,)), mode="hard")
            hess = model_batch_hessian(model, mask, x)
            aeh = np.abs(hess.mean(axis=0))
            eah = np.abs(hess).mean(axis=0)
            pairs = all_pairs(d)
            e1 = geh_single_sample(model, mask, part1, x, pairs)
            en = geh_single_sample(model, mask, partn, x, pairs)
            for idx, (i, j) in enumerate(pairs):
                assert abs(e1[idx] - aeh[i, j]) <= 1e-12
                assert abs(en[idx] - eah[i, j]) <= 1e-12


def test_monotone_dominance_per_mask():
    # per weight draw: ungrouped >= grouped >= fully pooled, pairwise
    for seed in range(4):
        model = random_model(50 + seed, d=3)
        x = RngStream(60 + seed).generator().normal(size=(80, 3))
        mask = sample_mask(model.net, RngStream(70 + seed), mode="hard")
        pairs = all_pairs(3)
        e1 = geh_single_sample(model, mask, partition_kmeans(x, 1, RngStream(1)), x, pairs)
        em = geh_single_sample(model, mask, partition_kmeans(x, 7, RngStream(1)), x, pairs)
        en = geh_single_sample(model, mask, partition_kmeans(x, 80, RngStream(1)), x, pairs)
        assert np.all(en >= em - 1e-12)
        assert np.all(em >= e1 - 1e-12)


def test_permutation_equivariance():
    d = 3
    perm = [2, 0, 1]  # permuted column a holds original feature perm[a]
    model = random_model(77, d=d, hidden=(5,))
    x = RngStream(88).generator().normal(size=(40, d))
    mask = sample_mask(model.net, RngStream(99), mode="hard")

    model_p = model.copy()
    model_p.net.weights[0] = model.net.weights[0][perm, :]
    model_p.net.gate_logits[0] = model.net.gate_logits[0][perm]
    model_p.beta = model.beta[perm]
    mask_p = MaskSample(gates=[mask.gates[0][perm]] + [g.copy() for g in mask.gates[1:]],
                        mode="hard")
    x_p = x[:, perm]

    part = partition_kmeans(x, 4, RngStream(11))
    part_p = partition_kmeans(x_p, 4, RngStream(11))
    pairs = all_pairs(d)
    eff = geh_single_sample(model, mask, part, x, pairs)
    eff_p = geh_single_sample(model_p, mask_p, part_p, x_p, pairs)

    lookup = {pair: v for pair, v in zip(pairs, eff)}
    for idx, (a, b) in enumerate(pairs):
        orig = tuple(sorted((perm[a], perm[b])))
        assert eff_p[idx] == pytest.approx(lookup[orig], abs=1e-10)


def test_estimates_from_samples_statistics():
    samples = np.array([[1.0, 0.2], [3.0, 0.4], [2.0, 0.6]])
    pairs = [(0, 1), (0, 2)]
    ests = estimates_from_samples(samples, pairs)
    assert ests[0].mean == pytest.approx(2.0)
    assert ests[0].variance == pytest.approx(1.0)  # unbiased, divisor K-1
    assert ests[0].rank == 1 and ests[1].rank == 2
    rev = estimates_from_samples(samples[::-1], pairs)
    assert rev[0].mean == pytest.approx(ests[0].mean, abs=1e-14)
    assert rev[0].variance == pytest.approx(ests[0].variance, abs=1e-14)


def test_estimate_arithmetic_reference_rows():
    # (mean, sd) -> interval and one-sided tail probability
    def make(mean, sd):
        d = sd / np.sqrt(2.0)
        ests = estimates_from_samples(np.array([[mean - d], [mean + d]]), [(0, 1)])
        return ests[0]

    e1 = make(1.532, 0.751)
    assert e1.ci_low == pytest.approx(0.030, abs=1e-3)
    assert e1.ci_high == pytest.approx(3.034, abs=1e-3)
    assert significance(e1)

    e2 = make(0.901, 0.330)
    assert e2.ci_low == pytest.approx(0.241, abs=1e-3)
    assert e2.ci_high == pytest.approx(1.561, abs=1e-3)
    assert e2.p_bayes == pytest.approx(0.003, abs=1e-3)


def test_significance_rule():
    def est(mean, sd):
        return InteractionEstimate(0, 1, mean, sd * sd, mean - 2 * sd,
                                   mean + 2 * sd, 0.5, 1)

    assert significance(est(1.532, 0.751))  # interval (0.030, 3.034)
    assert not significance(est(0.0, 0.1))
    assert not significance(InteractionEstimate(0, 1, 0.2, 0.0, -0.1, 0.5, 0.5, 1))


def test_bayesian_geh_deterministic_net_has_no_spread():
    model = random_model(31, d=2)
    for lg in model.net.gate_logits:
        lg.fill(-30.0)
    x = RngStream(32).generator().normal(size=(50, 2))
    part = partition_kmeans(x, 1, RngStream(33))
    ests = bayesian_geh(model, part, x, 20, RngStream(34))
    assert ests[0].variance == pytest.approx(0.0, abs=1e-20)
    assert ests[0].ci_high - ests[0].ci_low == pytest.approx(0.0, abs=1e-12)
    assert ests[0].p_bayes == 0.0  # positive mean, zero spread


def test_bayesian_geh_deterministic_given_seed():
    model = random_model(41, d=3)
    x = RngStream(42).generator().normal(size=(60, 3))
    part = partition_kmeans(x, 5, RngStream(43))
    a = bayesian_geh(model, part, x, 15, RngStream(44))
    b = bayesian_geh(model, part, x, 15, RngStream(44))
    assert [(e.mean, e.variance) for e in a] == [(e.mean, e.variance) for e in b]


def test_shared_masks_across_partitions():
    model = random_model(51, d=3)
    x = RngStream(52).generator().normal(size=(50, 3))
    parts = {1: partition_kmeans(x, 1, RngStream(53)),
             50: partition_kmeans(x, 50, RngStream(53))}
    samples = mc_effect_samples(model, x, parts, 8, RngStream(54))
    # same draws: ungrouped dominates pooled sample by sample
    assert np.all(samples[50] >= samples[1] - 1e-12)


def test_rank_weighted_distance_examples():
    w = np.array([0.9, 0.5, 0.1])
    assert rank_weighted_distance(w, w) == 0.0
    # effects move but the ordering is unchanged -> still zero
    assert rank_weighted_distance(w, np.array([0.8, 0.45, 0.2])) == 0.0
    # rank swap: (0.2-0.9)^2 * 1 + (0.8-0.1)^2 * 1 = 0.98
    assert rank_weighted_distance(np.array([0.9, 0.1]),
                                  np.array([0.2, 0.8])) == pytest.approx(0.98)
    with pytest.raises(ValueError):
        rank_weighted_distance(np.zeros(2), np.zeros(3))


def test_choose_m_from_deltas():
    assert choose_m_from_deltas([2, 3, 4], [0.0, 0.0, 0.0]) == 2
    assert choose_m_from_deltas([2, 3, 4, 5, 6],
                                [5.0, 3.0, 0.01, 0.02, 0.01]) == 4
    assert choose_m_from_deltas([2, 3], [1.0, 2.0]) == 3  # never settles


def test_select_m_trivial_single_pair():
    # one feature pair: its rank can never change, so every distance is zero
    model = product_square_model()
    pts = RngStream(61).generator().uniform(-1, 1, size=(80, 2))
    trace = select_m(model, pts, range(2, 6), 5, RngStream(62))
    assert trace.deltas == [0.0] * 4
    assert trace.chosen == 2


def test_select_m_validation():
    model = product_square_model()
    pts = RngStream(63).generator().uniform(-1, 1, size=(30, 2))
    with pytest.raises(ValueError):
        select_m(model, pts, range(1, 4), 4, RngStream(0))
    with pytest.raises(ValueError):
        select_m(model, pts, [2, 4, 5], 4, RngStream(0))


def test_report_round_trip(tmp_path):
    import json

    model = random_model(71, d=3)
    x = RngStream(72).generator().normal(size=(40, 3))
    part = partition_kmeans(x, 3, RngStream(73))
    ests = bayesian_geh(model, part, x, 10, RngStream(74))
    path = tmp_path / "report.json"
    write_report_json(ests, path, meta={"seed": 7})
    doc = json.loads(path.read_text())
    assert len(doc["interactions"]) == 3
    ranks = [r["rank"] for r in doc["interactions"]]
    assert ranks == sorted(ranks)
    for rec in doc["interactions"]:
        assert rec["significant"] == (rec["ci_low"] > 0.0)


def test_selection_csv(tmp_path):
    model = product_square_model()
    pts = RngStream(81).generator().uniform(-1, 1, size=(40, 2))
    trace = select_m(model, pts, range(2, 5), 4, RngStream(82))
    path = tmp_path / "trace.csv"
    write_selection_csv(trace, path, meta={"seed": 1})
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("#")
    assert lines[1] == "m,delta_sq"
    assert len(lines) == 2 + 3


def test_report_csv_contents(tmp_path):
    from hessix.interactions import write_report_csv

    model = random_model(91, d=3)
    x = RngStream(92).generator().normal(size=(30, 3))
    part = partition_kmeans(x, 2, RngStream(93))
    ests = bayesian_geh(model, part, x, 8, RngStream(94))
    path = tmp_path / "report.csv"
    write_report_csv(ests, path, meta={"seed": 3})
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    header = lines[0].split(",")
    assert header[:4] == ["rank", "feature_i", "feature_j", "mean"]
    assert len(lines) == 1 + 3
    first = dict(zip(header, lines[1].split(",")))
    assert int(first["rank"]) == 1


def test_unstandardized_estimates_scaling():
    from hessix.core import Standardizer
    from hessix.interactions import unstandardized_estimates

    model = random_model(95, d=2)
    model.x_standardizer = Standardizer(mean=np.zeros(2),
                                        std=np.array([2.0, 4.0]),
                                        constant=np.zeros(2, dtype=bool))
    model.y_standardizer = Standardizer(mean=np.zeros(1), std=np.array([10.0]),
                                        constant=np.zeros(1, dtype=bool))
    est = InteractionEstimate(0, 1, 0.5, 0.04, 0.1, 0.9, 0.01, 1)
    raw = unstandardized_estimates([est], model)[0]
    scale = 10.0 / (2.0 * 4.0)
    assert raw.mean == pytest.approx(0.5 * scale)
    assert raw.variance == pytest.approx(0.04 * scale ** 2)
    assert raw.ci_low == pytest.approx(0.1 * scale)
    assert raw.p_bayes == est.p_bayes

import itertools

import numpy as np
import pytest
from helpers import label_image_sample, oracle_checkpoint
from hypothesis import given, settings
from hypothesis import strategies as st

from scalenets.data import generate_phantom
from scalenets.evaluation import DEFAULT_REGIONS, DiceReport, dice_region, evaluate, validate_regions, wilcoxon_signed_rank


def brute_force_p(a, b, alternative="two-sided"):
    """Independent oracle: float ranks, explicit loop over every sign pattern."""
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    absd = np.abs(d)
    ranks = np.array([np.sum(absd < x) + (np.sum(absd == x) + 1) / 2 for x in absd])
    w_plus = ranks[d > 0].sum()
    total = ranks.sum()
    stat = min(w_plus, total - w_plus)
    hits = 0
    count = 0
    for signs in itertools.product([0, 1], repeat=len(d)):
        wp = ranks[np.array(signs, bool)].sum()
        count += 1
        if alternative == "two-sided":
            hits += min(wp, total - wp) <= stat + 1e-9
        elif alternative == "greater":
            hits += wp >= w_plus - 1e-9
        else:
            hits += wp <= w_plus + 1e-9
    return hits / count


def test_dice_examples():
    t = np.array([0, 2, 3, 5, 1])
    assert dice_region(t, t, {2, 3, 4, 5}) == 1.0
    # |A| = |B| = 2, overlap 1
    assert dice_region(np.array([5, 5, 0, 0]), np.array([5, 0, 5, 0]), {5}) == 0.5
    assert dice_region(np.array([5, 0]), np.array([0, 0]), {5}) == 0.0
    assert dice_region(np.array([1, 0]), np.array([0, 1]), {5}) == 1.0
    with pytest.raises(ValueError):
        dice_region(np.zeros(3), np.zeros(4), {1})


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=40), st.randoms())
def test_dice_symmetric_and_permutation_invariant(values, rnd):
    a = np.array(values)
    b = np.array(rnd.sample(values, len(values)))
    for region in DEFAULT_REGIONS.values():
        assert dice_region(a, b, region) == dice_region(b, a, region)
        perm = np.array(rnd.sample(range(len(a)), len(a)))
        assert dice_region(a[perm], b[perm], region) == dice_region(a, b, region)
        assert 0.0 <= dice_region(a, b, region) <= 1.0


def test_region_validation():
    with pytest.raises(ValueError):
        validate_regions({"whole": {2, 9}})
    with pytest.raises(ValueError):
        validate_regions({"whole": {2}, "core": {2, 4}, "active": {4}})


def test_oracle_checkpoint_scores_100():
    rng = np.random.default_rng(0)
    samples = [label_image_sample(generate_phantom((16, 16, 16), 1, rng).labels) for _ in range(2)]
    report = evaluate(oracle_checkpoint(), samples)
    for r in report.regions:
        assert report.scores[r] == [100.0, 100.0]
        assert report.mean(r) == 100.0 and report.std(r) == 0.0


def test_constant_background_scores_zero():
    ckpt = oracle_checkpoint()
    ckpt.params["1.weight"][:] = 0.0
    ckpt.params["1.bias"][:] = [5.0, 0, 0, 0, 0, 0]
    sample = label_image_sample(generate_phantom((16, 16, 16), 1, np.random.default_rng(1)).labels)
    report = evaluate(ckpt, [sample])
    assert all(report.scores[r] == [0.0] for r in report.regions)


def test_modality_mismatch():
    sample = generate_phantom((16, 16, 16), 2, np.random.default_rng(1))
    with pytest.raises(ValueError, match="modalities"):
        evaluate(oracle_checkpoint(), [sample])


def test_report_mean_std_by_hand():
    # three subjects, whole tumour Dice 1, 0.5, 0 -> mean 50, population std 40.8
    truths = [np.array([[[2, 2, 0, 0]]]), np.array([[[2, 2, 0, 0]]]), np.array([[[2, 2, 0, 0]]])]
    preds = [np.array([[[2, 2, 0, 0]]]), np.array([[[2, 0, 2, 0]]]), np.array([[[0, 0, 2, 2]]])]
    samples = [label_image_sample(t) for t in truths]
    ckpt = oracle_checkpoint()
    report = DiceReport(("whole",))
    for i, (p, t) in enumerate(zip(preds, truths)):
        report.add(f"s{i}", {"whole": 100 * dice_region(p, t, DEFAULT_REGIONS["whole"])})
    assert report.mean("whole") == pytest.approx(50.0)
    assert report.std("whole") == pytest.approx(np.sqrt((50 ** 2 + 0 + 50 ** 2) / 3))
    assert "# mean\twhole\t50.0" in report.to_text()
    assert "# std\twhole\t40.8" in report.to_text()
    assert evaluate(ckpt, samples).mean("whole") == 100.0


def test_report_text_round_trip():
    r = DiceReport(("whole", "core"))
    r.add("a", {"whole": 91.25, "core": 80.5})
    r.add("b", {"whole": 70.0, "core": 60.125})
    back = DiceReport.from_text(r.to_text())
    assert back.subjects == ["a", "b"] and back.regions == ("whole", "core")
    assert back.scores == r.scores
    with pytest.raises(ValueError):
        DiceReport.from_text("a\twhole\n")


def test_wilcoxon_all_positive_n5():
    a = np.array([5.0, 6, 7, 8, 9])
    b = a - np.array([1.0, 2, 3, 4, 5])
    res = wilcoxon_signed_rank(a, b)
    assert res.statistic == 0 and res.w_minus == 0 and res.exact
    assert res.pvalue == 0.0625
    assert wilcoxon_signed_rank(a, b, "greater").pvalue == 0.03125
    assert wilcoxon_signed_rank(a, b, "less").pvalue == 1.0


def test_wilcoxon_symmetric_pair_is_centred():
    a = np.array([1.0, 2, 3, 4, 5, 6])
    b = a.copy()
    b[0] += 1.0
    b[1] -= 1.0
    assert wilcoxon_signed_rank(a, b).pvalue == 1.0


def test_wilcoxon_no_nonzero_pairs():
    with pytest.raises(ValueError, match="no nonzero pairs"):
        wilcoxon_signed_rank([1.0, 2.0], [1.0, 2.0])


@pytest.mark.parametrize("seed", range(6))
def test_wilcoxon_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 13))
    a = rng.integers(0, 6, size=n).astype(float)  # small integers force ties and zeros
    b = rng.integers(0, 6, size=n).astype(float)
    if np.all(a == b):
        b[0] += 1
    for alt in ("two-sided", "greater", "less"):
        assert wilcoxon_signed_rank(a, b, alt).pvalue == pytest.approx(brute_force_p(a, b, alt), abs=1e-15)


def test_wilcoxon_scale_invariance():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=9), rng.normal(size=9)
    p = wilcoxon_signed_rank(a, b).pvalue
    assert wilcoxon_signed_rank(3 * a + 7, 3 * b + 7).pvalue == p


def test_wilcoxon_normal_approximation_close_to_exact():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=15), rng.normal(0.3, 1, size=15)
    res = wilcoxon_signed_rank(a, b)
    assert not res.exact
    assert abs(res.pvalue - brute_force_p(a, b)) <= 0.02

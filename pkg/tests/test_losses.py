import csv
import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eras import autograd as ag
from eras.losses import (MAG_FLOOR, DirectedTerm, LossError, LossWeights, eras_loss, icc_loss, isms_loss, ras_loss,
                         reports_to_csv, signal_loss, to_pair)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def naive_signal_loss(ref, est, mix):
    num = den = 0.0
    for t in range(ref.shape[0]):
        for f in range(ref.shape[1]):
            d = ref[t, f] - est[t, f]
            num += abs(d.real) + abs(d.imag) + abs(abs(ref[t, f]) - abs(est[t, f]))
            den += abs(mix[t, f].real) + abs(mix[t, f].imag) + abs(mix[t, f])
    return num / den


def naive_isms(mapped, mix):
    def scatter(Y):
        total = 0.0
        for t in range(Y.shape[0]):
            logs = [np.log(max(abs(v), MAG_FLOOR)) for v in Y[t]]
            mu = sum(logs) / len(logs)
            total += sum((v - mu) ** 2 for v in logs) / len(logs)
        return total
    return sum(scatter(Y) for Y in mapped) / len(mapped) / scatter(mix)


def test_signal_loss_basics(rng):
    X = crandn(rng, 8, 5)
    assert signal_loss(X, X, X).item() == 0.0
    assert signal_loss(X, np.zeros_like(X), X).item() == pytest.approx(1.0, abs=1e-15)


def test_signal_loss_matches_naive_oracle(rng):
    ref, est, mix = crandn(rng, 7, 6), crandn(rng, 7, 6), crandn(rng, 7, 6)
    assert signal_loss(ref, est, mix).item() == pytest.approx(naive_signal_loss(ref, est, mix), rel=1e-12)


def test_signal_loss_errors(rng):
    X = crandn(rng, 4, 3)
    with pytest.raises(LossError):
        signal_loss(X, X[:3], X)
    with pytest.raises(LossError, match="zero-norm"):
        signal_loss(X, X, np.zeros_like(X))


def test_ras(rng, scenes):
    from eras.signal import stft

    sc = scenes[0]
    X = stft(sc.mixtures[1].mono).bins
    imgs = [stft(sc.images[n][1].mono).bins for n in range(2)]
    assert ras_loss(X, imgs, X).item() <= 1e-10
    assert ras_loss(X, [X, np.zeros_like(X)], X).item() == 0.0
    a, b = crandn(rng, 6, 4), crandn(rng, 6, 4)
    assert ras_loss(X[:6, :4], [a, b], X[:6, :4]).item() == pytest.approx(naive_signal_loss(X[:6, :4], a + b, X[:6, :4]),
                                                                          rel=1e-12)


def test_isms_degenerate_rows(rng):
    X = crandn(rng, 30, 17)
    Z = np.zeros_like(X)
    assert isms_loss([X, X], X).item() == pytest.approx(1.0, abs=1e-12)
    assert isms_loss([X, Z], X).item() == pytest.approx(0.5, abs=1e-12)
    assert isms_loss([Z, Z], X).item() == pytest.approx(0.0, abs=1e-12)


def test_isms_matches_naive(rng):
    X, A, B = crandn(rng, 6, 7), crandn(rng, 6, 7), crandn(rng, 6, 7)
    assert isms_loss([A, B], X).item() == pytest.approx(naive_isms([A, B], X), rel=1e-12)


def test_isms_degenerate_denominator():
    with pytest.raises(LossError, match="denominator"):
        isms_loss([np.ones((4, 5))], np.ones((4, 5)))
    with pytest.raises(LossError):
        isms_loss([], np.ones((4, 5)))


@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_isms_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    X, A, B = crandn(rng, 10, 9), crandn(rng, 10, 9), crandn(rng, 10, 9)
    assert isms_loss([c * A, c * B], X).item() == pytest.approx(isms_loss([A, B], X).item(), abs=1e-10)


@given(st.integers(0, 2**31))
def test_components_non_negative(seed):
    rng = np.random.default_rng(seed)
    X, A, B = crandn(rng, 5, 4), crandn(rng, 5, 4), crandn(rng, 5, 4)
    assert ras_loss(X, [A, B], X).item() >= 0
    assert isms_loss([A, B], X).item() >= 0
    assert icc_loss([A, B], [B, A], X)[0].item() >= 0


def test_icc_permutations(rng):
    X, A, B = crandn(rng, 5, 4), crandn(rng, 5, 4), crandn(rng, 5, 4)
    v, p = icc_loss([A, B], [A, B], X)
    assert v.item() == 0 and p == (0, 1)
    v, p = icc_loss([A, B], [B, A], X)
    assert v.item() == 0 and p == (1, 0)


@given(st.integers(0, 2**31))
def test_icc_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    X = crandn(rng, 5, 4)
    s = [crandn(rng, 5, 4) for _ in range(2)]
    c = [crandn(rng, 5, 4) for _ in range(2)]
    keep = 0.5 * (naive_signal_loss(s[0], c[0], X) + naive_signal_loss(s[1], c[1], X))
    swap = 0.5 * (naive_signal_loss(s[0], c[1], X) + naive_signal_loss(s[1], c[0], X))
    v, p = icc_loss(s, c, X)
    assert v.item() == pytest.approx(min(keep, swap), rel=1e-12)
    assert p == ((0, 1) if keep <= swap else (1, 0))
    # consistently permuting both lists leaves the value unchanged
    assert icc_loss(s[::-1], c[::-1], X)[0].item() == pytest.approx(v.item(), rel=1e-12)


def test_icc_stop_gradient(rng):
    X = crandn(rng, 5, 4)
    leaves = [ag.Tensor(rng.standard_normal((5, 4)), requires_grad=True) for _ in range(8)]
    self_m = [(leaves[0], leaves[1]), (leaves[2], leaves[3])]
    cross = [(leaves[4], leaves[5]), (leaves[6], leaves[7])]
    v, _ = icc_loss(self_m, cross, X)
    v.backward()
    assert all(l.grad is None for l in leaves[:4])
    assert all(l.grad is not None and np.any(l.grad) for l in leaves[4:])


def test_icc_needs_two_sources(rng):
    X = crandn(rng, 3, 3)
    with pytest.raises(LossError):
        icc_loss([X], [X], X)


def terms_for(rng, with_self=True, with_same=False):
    out = []
    for ref, tgt in ((0, 1), (1, 0)):
        X, Xr = crandn(rng, 6, 5), crandn(rng, 6, 5)
        mapped = [to_pair(crandn(rng, 6, 5)) for _ in range(2)]
        self_m = [crandn(rng, 6, 5) for _ in range(2)] if with_self else None
        same = [to_pair(crandn(rng, 6, 5)) for _ in range(2)] if with_same else None
        out.append(DirectedTerm(ref, tgt, X, mapped, self_m, Xr, same))
    return out


def test_eras_reduces_to_ras(rng):
    terms = terms_for(rng)
    rep = eras_loss(terms, LossWeights(0.0, 0.0))
    expect = sum(ras_loss(t.mix_target, t.mapped, t.mix_target).item() for t in terms)
    assert rep.total == pytest.approx(expect, rel=1e-12)
    assert set(rep.components) == {"ras[0->1]", "ras[1->0]"}


def test_eras_stage1_and_stage2_weights(rng):
    terms = terms_for(rng)
    s1 = eras_loss(terms, LossWeights(beta=0.3, gamma=0.0))
    for d in ("0->1", "1->0"):
        assert f"isms[{d}]" in s1.components and f"icc[{d}]" not in s1.components
    assert s1.total == pytest.approx(sum(s1.components[f"ras[{d}]"] + 0.3 * s1.components[f"isms[{d}]"]
                                         for d in ("0->1", "1->0")), rel=1e-12)
    s2 = eras_loss(terms, LossWeights(beta=0.0, gamma=0.1))
    assert s2.total == pytest.approx(sum(s2.components[f"ras[{d}]"] + 0.1 * s2.components[f"icc[{d}]"]
                                         for d in ("0->1", "1->0")), rel=1e-12)
    assert set(s2.permutations) == {"0->1", "1->0"}


@given(st.integers(0, 2**31), st.floats(0, 2), st.floats(0, 2), st.floats(0, 0.99))
def test_total_equals_weighted_components(seed, beta, gamma, alpha):
    rep = eras_loss(terms_for(np.random.default_rng(seed), True, True), LossWeights(beta, gamma, alpha))
    assert abs(rep.total - rep.weighted_sum()) <= 1e-12 * max(1.0, abs(rep.total))
    assert all(v >= 0 for v in rep.components.values())


def test_weights_validation():
    with pytest.raises(LossError):
        LossWeights(beta=-0.1)
    with pytest.raises(LossError):
        LossWeights(alpha_ref=1.0)
    assert LossWeights(alpha_ref=0.1).alpha(0, 2).tolist() == [0.1, 1.0]
    assert LossWeights().alpha(1, 2).tolist() == [1.0, 0.0]


def test_missing_inputs(rng):
    with pytest.raises(LossError):
        eras_loss(terms_for(rng, with_self=False), LossWeights(0.0, 0.1))
    with pytest.raises(LossError):
        eras_loss(terms_for(rng), LossWeights(0.0, 0.0, 0.1))
    with pytest.raises(LossError):
        eras_loss([], LossWeights())


def test_csv_trace(rng):
    rep = eras_loss(terms_for(rng), LossWeights(0.3, 0.1))
    text = reports_to_csv([(0, rep), (1, rep)])
    rows = list(csv.DictReader(io.StringIO(text)))
    assert list(rows[0]) == ["step", "direction", "ras", "isms", "icc", "total"]
    assert len(rows) == 4 and rows[2]["step"] == "1"
    assert float(rows[0]["icc"]) == pytest.approx(rep.components["icc[0->1]"])

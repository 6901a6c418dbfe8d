import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import svm_primal_exact
from texfv import svm
from texfv.errors import BadMagic, DimensionMismatch, NonPositiveLambda, SingleClass
from texfv.svm import LinearSvmModel


def tiny_problem(seed, n=20, d=2):
    rng = np.random.default_rng(seed)
    y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    y[:2] = [1.0, -1.0]
    x = rng.normal(size=(n, d)) + 0.8 * y[:, None]
    return x, y


def primal(w_aug, x, y, lam):
    xa = np.hstack([x, np.ones((len(x), 1))])
    return lam / 2 * w_aug @ w_aug + np.mean(np.maximum(0, 1 - y * (xa @ w_aug)))


def test_symmetric_pair():
    x = np.array([[1.0, 0.0], [-1.0, 0.0]])
    labels = np.array([1, -1])
    m = svm.train_sdca(x, labels, lam=1e-3, gap_tol=1e-9, max_epochs=1000)
    assert list(svm.predict(m, x)) == [1, -1]
    # boundary of the +1-vs-rest scorer crosses the y axis at x = 0
    row = list(m.classes).index(1)
    w, b = m.weights[row], m.bias[row]
    assert abs(b / w[0]) < 1e-6


@pytest.mark.parametrize("method", ["primal", "gram"])
def test_tiny_problem_matches_exact_qp(method):
    x, y = tiny_problem(0)
    lam = 0.05
    res = svm.train_binary_sdca(x, y, lam, max_epochs=5000, gap_tol=1e-6, seed=1, method=method)
    best, _ = svm_primal_exact(np.hstack([x, np.ones((len(x), 1))]), y, lam)
    assert abs(primal(res.w, x, y, lam) - best) <= 1e-3
    assert 0 <= res.gap <= 1e-6


def test_gram_and_primal_paths_agree():
    x, y = tiny_problem(3, n=25, d=3)
    a = svm.train_binary_sdca(x, y, 0.1, seed=4, method="gram", max_epochs=30, gap_tol=0)
    b = svm.train_binary_sdca(x, y, 0.1, seed=4, method="primal", max_epochs=30, gap_tol=0)
    np.testing.assert_allclose(a.w, b.w, atol=1e-9)
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-9)


def test_duplicated_points_same_decision_function():
    x, y = tiny_problem(5, n=15, d=2)
    labels = (y > 0).astype(int)
    kw = dict(lam=0.05, gap_tol=1e-13, max_epochs=20000, seed=2)
    a = svm.train_sdca(x, labels, **kw)
    b = svm.train_sdca(np.vstack([x, x]), np.concatenate([labels, labels]), **kw)
    np.testing.assert_allclose(svm.decision_scores(a, x), svm.decision_scores(b, x), atol=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1.0))
def test_dual_monotone_and_gap_nonnegative(seed, lam):
    x, y = tiny_problem(seed, n=30, d=3)
    res = svm.train_binary_sdca(x, y, lam, max_epochs=50, gap_tol=1e-4, seed=seed)
    hist = np.array(res.dual_history)
    assert np.all(np.diff(hist) >= -1e-9)
    assert res.gap >= -1e-12
    upper = 1 / (lam * len(y))
    assert np.all((res.beta >= 0) & (res.beta <= upper + 1e-15))


def test_deterministic_bits():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 6))
    labels = rng.integers(0, 3, 40)
    a = svm.train_sdca(x, labels, seed=7)
    b = svm.train_sdca(x, labels, seed=7)
    assert a.weights.tobytes() == b.weights.tobytes()
    assert a.bias.tobytes() == b.bias.tobytes()


def test_reported_gap_within_tolerance():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(60, 5))
    labels = np.argmax(x[:, :3], axis=1)
    m = svm.train_sdca(x, labels, gap_tol=1e-3)
    assert all(0 <= g <= 1e-3 for g in m.training_meta["duality_gap"])
    assert m.lam == pytest.approx(1 / 60)


def test_errors():
    x = np.zeros((4, 2))
    with pytest.raises(SingleClass):
        svm.train_sdca(x, [1, 1, 1, 1])
    with pytest.raises(NonPositiveLambda):
        svm.train_sdca(x, [0, 1, 0, 1], lam=0)
    with pytest.raises(DimensionMismatch):
        svm.train_sdca([np.zeros(2), np.zeros(3)], [0, 1])
    m = svm.train_sdca(np.eye(4), [0, 1, 0, 1])
    with pytest.raises(DimensionMismatch):
        svm.decision_scores(m, np.zeros(3))


# --- scoring -------------------------------------------------------------------


def _model(w, b, classes=None):
    w = np.asarray(w, dtype=float)
    classes = np.arange(len(w)) if classes is None else np.asarray(classes)
    return LinearSvmModel(classes, w, np.asarray(b, dtype=float), 0.1)


def test_scores_linearity(rng):
    m = _model(rng.normal(size=(4, 5)), rng.normal(size=4))
    np.testing.assert_array_equal(svm.decision_scores(m, np.zeros(5)), m.bias)
    x = rng.normal(size=5)
    np.testing.assert_allclose(svm.decision_scores(m, 2 * x) - m.bias, 2 * (svm.decision_scores(m, x) - m.bias))
    z = _model(np.zeros((3, 5)), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(svm.decision_scores(z, x), [1.0, 2.0, 3.0])


def test_predict_argmax_and_ties():
    m = _model(np.zeros((3, 1)), [0.1, 0.9, 0.3])
    assert svm.predict(m, [0.0]) == 1
    tie = _model(np.zeros((6, 1)), [0, 0, 5, 0, 0, 5])
    assert svm.predict(tie, [0.0]) == 2


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_predict_invariant_to_positive_rescaling(seed, c):
    rng = np.random.default_rng(seed)
    m = _model(rng.normal(size=(5, 4)), rng.normal(size=5))
    m2 = _model(c * m.weights, c * m.bias)
    x = rng.normal(size=(10, 4))
    assert np.array_equal(svm.predict(m, x), svm.predict(m2, x))


def test_svm_file_round_trip(tmp_path, rng):
    m = _model(rng.normal(size=(3, 7)), rng.normal(size=3), classes=[0, 5, 7])
    p = tmp_path / "m.svm"
    svm.save_svm(m, p)
    raw = p.read_bytes()
    assert raw[:4] == b"SVM1"
    back = svm.load_svm(p)
    assert back.weights.tobytes() == m.weights.tobytes()
    assert list(back.classes) == [0, 5, 7]
    # without the class-id trailer, rows map to 0..C-1
    p.write_bytes(raw[: -8 * 3])
    assert list(svm.load_svm(p).classes) == [0, 1, 2]
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagic):
        svm.load_svm(p)

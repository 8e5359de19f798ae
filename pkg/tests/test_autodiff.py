import numpy as np
import pytest

from phonerec import autodiff as ad


def test_softmax_uniform():
    out = ad.softmax(ad.tensor([0.0, 0.0, 0.0])).value
    assert np.allclose(out, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_log_softmax_matches_log_of_softmax():
    x = ad.tensor([1.0, 2.0, 3.0])
    lhs = ad.log_softmax(x).value
    rhs = np.log(ad.softmax(x).value)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    out = ad.matmul(ad.tensor(np.eye(3)), ad.tensor(a)).value
    assert np.array_equal(out, a)


def test_softmax_rows_normalized_and_positive():
    rng = np.random.default_rng(1)
    x = ad.tensor(rng.normal(scale=10.0, size=(8, 11)))
    out = ad.softmax(x, axis=-1).value
    assert np.all(np.abs(out.sum(axis=-1) - 1.0) < 1e-12)
    assert np.all(out > 0.0)


def test_backprop_elementwise_square_sum():
    x = ad.parameter([1.0, 2.0, 3.0])
    root = ad.sum_(ad.mul(x, x))
    ad.backpropagate(root)
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_backprop_log_softmax_pick():
    rng = np.random.default_rng(2)
    v = rng.normal(size=5)
    k = 3
    x = ad.parameter(v)
    root = ad.log_softmax(x)[k]
    ad.backpropagate(root)
    onehot = np.eye(5)[k]
    p = np.exp(v - v.max())
    p /= p.sum()
    assert np.allclose(x.grad, onehot - p, atol=1e-12)


def test_backprop_requires_scalar_root():
    x = ad.parameter(np.ones((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        ad.backpropagate(ad.mul(x, x))


def test_backprop_deterministic_bit_identical():
    rng = np.random.default_rng(3)
    x = ad.parameter(rng.normal(size=(4, 5)))
    w = ad.parameter(rng.normal(size=(5, 3)))
    root = ad.sum_(ad.tanh(ad.matmul(x, w)))
    ad.backpropagate(root)
    g1x, g1w = x.grad.copy(), w.grad.copy()
    x.grad = None
    w.grad = None
    ad.backpropagate(root)
    assert np.array_equal(g1x, x.grad) and np.array_equal(g1w, w.grad)


def test_shape_mismatch_names_primitive_and_shapes():
    a = ad.tensor(np.ones((2, 3)))
    b = ad.tensor(np.ones((4, 5)))
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        ad.matmul(a, b)
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(a, b)


def test_gradient_check_tanh_chain():
    def program(t):
        return ad.sum_(ad.tanh(ad.tanh(ad.matmul(t["x"], t["w"]))))

    rng = np.random.default_rng(4)
    report = ad.gradient_check(
        program,
        {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 2))},
        epsilon=1e-5, tolerance=1e-6)
    assert report.passed
    assert max(report.max_rel_error.values()) < 1e-6


def test_gradient_check_layer_norm_block():
    def program(t):
        h = ad.layer_norm(ad.matmul(t["x"], t["w"]), t["g"], t["b"])
        return ad.sum_(ad.relu(h))

    rng = np.random.default_rng(5)
    report = ad.gradient_check(
        program,
        {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 6)),
         "g": 1.0 + 0.1 * rng.normal(size=6), "b": 0.1 * rng.normal(size=6)},
        epsilon=1e-5, tolerance=1e-4)
    assert report.passed


def test_gradient_check_constant_only_graph():
    report = ad.gradient_check(lambda t: ad.sum_(ad.tensor([1.0, 2.0])), {})
    assert report.max_rel_error == {} and report.passed


def _fd_check(program, inputs, tol=1e-4, seed=0):
    report = ad.gradient_check(program, inputs, epsilon=1e-5, tolerance=tol)
    assert report.passed, report.max_rel_error


# analytic vs central finite differences on 20 random inputs per primitive
@pytest.mark.parametrize("trial", range(20))
def test_primitive_gradients_match_finite_differences(trial):
    rng = np.random.default_rng(100 + trial)
    x = rng.normal(size=(2, 3))
    y = rng.normal(size=(2, 3))
    w = rng.normal(size=(3, 4))
    cases = {
        "add": (lambda t: ad.sum_(ad.add(t["a"], t["b"])), {"a": x, "b": y}),
        "sub": (lambda t: ad.sum_(ad.sub(t["a"], t["b"])), {"a": x, "b": y}),
        "mul": (lambda t: ad.sum_(ad.mul(t["a"], t["b"])), {"a": x, "b": y}),
        "matmul": (lambda t: ad.sum_(ad.matmul(t["a"], t["w"])), {"a": x, "w": w}),
        "transpose": (lambda t: ad.sum_(ad.mul(ad.transpose(t["a"]), ad.transpose(t["a"]))),
                      {"a": x}),
        "reshape": (lambda t: ad.sum_(ad.tanh(ad.reshape(t["a"], (3, 2)))), {"a": x}),
        "concat": (lambda t: ad.sum_(ad.tanh(ad.concat([t["a"], t["b"]], axis=1))),
                   {"a": x, "b": y}),
        "slice": (lambda t: ad.sum_(ad.tanh(t["a"][:, 1:3])), {"a": x}),
        "tanh": (lambda t: ad.sum_(ad.tanh(t["a"])), {"a": x}),
        "sigmoid": (lambda t: ad.sum_(ad.sigmoid(t["a"])), {"a": x}),
        "relu": (lambda t: ad.sum_(ad.relu(t["a"])), {"a": x + 0.05}),
        "exp": (lambda t: ad.sum_(ad.exp(t["a"])), {"a": x}),
        "log": (lambda t: ad.sum_(ad.log(t["a"])), {"a": np.abs(x) + 0.5}),
        "softmax": (lambda t: ad.sum_(ad.mul(ad.softmax(t["a"]), ad.tensor(y))), {"a": x}),
        "log_softmax": (lambda t: ad.sum_(ad.mul(ad.log_softmax(t["a"]), ad.tensor(y))),
                        {"a": x}),
        "mean": (lambda t: ad.sum_(ad.tanh(ad.mean(t["a"], axis=1))), {"a": x}),
        "take_last": (lambda t: ad.sum_(ad.take_last(t["a"], np.array([0, 2]))), {"a": x}),
        "embedding": (lambda t: ad.sum_(ad.tanh(ad.embedding(t["a"], np.array([1, 0, 1])))),
                      {"a": x}),
    }
    for name, (program, inputs) in cases.items():
        report = ad.gradient_check(program, inputs, epsilon=1e-5, tolerance=1e-4)
        assert report.passed, f"{name}: {report.max_rel_error}"


def test_composed_graph_matches_finite_differences():
    rng = np.random.default_rng(42)

    def program(t):
        h = ad.tanh(ad.matmul(t["x"], t["w1"]))
        h = ad.layer_norm(h, t["g"], t["b"])
        h = ad.sigmoid(ad.matmul(h, t["w2"]))
        return ad.mean(ad.log_softmax(h, axis=-1))

    report = ad.gradient_check(
        program,
        {"x": rng.normal(size=(3, 5)), "w1": rng.normal(size=(5, 4)),
         "g": np.ones(4), "b": np.zeros(4), "w2": rng.normal(size=(4, 3))},
        epsilon=1e-5, tolerance=1e-4)
    assert report.passed, report.max_rel_error


def test_dropout_train_scaling_and_eval_identity():
    x = ad.tensor(np.ones((1000,)))
    out = ad.dropout(x, 0.25, np.random.default_rng(0), training=True)
    kept = out.value != 0.0
    assert np.allclose(out.value[kept], 1.0 / 0.75)
    assert abs(kept.mean() - 0.75) < 0.05
    same = ad.dropout(x, 0.25, np.random.default_rng(0), training=False)
    assert same is x


def test_evaluate_graph_runs_program_over_named_inputs():
    root = ad.evaluate_graph(
        {"x": np.array([1.0, 2.0, 3.0])},
        lambda t: ad.sum_(ad.mul(t["x"], t["x"])))
    assert float(root.value) == 14.0
    leaves = ad.backpropagate(root)
    assert np.allclose(leaves[0][1], [2.0, 4.0, 6.0])
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.evaluate_graph({"x": np.ones((2, 3)), "y": np.ones((2, 3))},
                          lambda t: ad.matmul(t["x"], t["y"]))


def test_no_grad_skips_graph_recording():
    x = ad.parameter(np.ones(3))
    with ad.no_grad():
        out = ad.sum_(ad.mul(x, x))
    assert out._parents == ()


def test_batched_matmul_gradients():
    rng = np.random.default_rng(7)

    def program(t):
        return ad.sum_(ad.matmul(ad.matmul(t["a"], t["b"]), t["w"]))

    report = ad.gradient_check(
        program,
        {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(2, 4, 3)),
         "w": rng.normal(size=(3, 2))},
        epsilon=1e-5, tolerance=1e-4)
    assert report.passed, report.max_rel_error

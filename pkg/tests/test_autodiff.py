import numpy as np
import pytest
import scipy.sparse as sp

from oracles import central_differences, relative_error
from sincon import autodiff as ad


def check(fn, shapes, seed=0, positive=False):
    rng = np.random.default_rng(seed)
    params = {f"p{i}": (rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s))
              for i, s in enumerate(shapes)}
    _, analytic = ad.gradients(params, fn)
    numeric = central_differences(lambda p: float(fn({k: ad.Tensor(v, op="const") for k, v in p.items()}).value),
                                  params)
    assert relative_error(analytic, numeric) < 1e-7


def test_constant_loss_zero_gradient():
    loss, g = ad.gradients({"w": np.ones((2, 3))}, lambda p: ad.as_tensor(np.array(4.0)))
    assert loss == 4.0 and np.array_equal(g["w"], np.zeros((2, 3)))


def test_quadratic_probe():
    w = np.arange(6.0).reshape(2, 3)
    _, g = ad.gradients({"w": w}, lambda p: ad.sum(p["w"] * p["w"]))
    assert np.array_equal(g["w"], 2 * w)


def test_matmul_broadcast_add_relu():
    check(lambda p: ad.sum(ad.relu(p["p0"] @ p["p1"] + p["p2"])), [(4, 3), (3, 5), (5,)])


def test_division_sqrt_log_exp():
    check(lambda p: ad.sum(ad.log(ad.exp(p["p0"]) + 1.0) / ad.sqrt(ad.sum(p["p1"] * p["p1"], axis=1, keepdims=True))),
          [(3, 4), (3, 2)])


def test_transpose_concat_mean():
    check(lambda p: ad.mean(ad.concat([p["p0"], p["p1"]], axis=1) @ ad.concat([p["p0"], p["p1"]], axis=1).T),
          [(3, 2), (3, 4)])


def test_log_softmax():
    onehot = np.eye(3)[[0, 2, 1, 1]]
    check(lambda p: -ad.sum(ad.log_softmax(p["p0"]) * onehot), [(4, 3)])


def test_spmm():
    m = sp.random(5, 4, density=0.5, random_state=1, format="csr")
    check(lambda p: ad.sum(ad.spmm(m, p["p0"]) * ad.spmm(m, p["p0"])), [(4, 3)])


def test_reused_node_accumulates():
    x = np.array([1.0, 2.0, 3.0])
    _, g = ad.gradients({"x": x}, lambda p: ad.sum(p["x"] * p["x"] * p["x"]))
    assert np.allclose(g["x"], 3 * x ** 2)


def test_non_finite_names_op():
    with pytest.raises(ad.NumericError) as exc:
        ad.gradients({"x": np.array([0.0, 1.0])}, lambda p: ad.sum(ad.log(p["x"])))
    assert exc.value.op == "log"


def test_numpy_left_operand_defers():
    t = ad.Tensor(np.eye(2))
    out = np.ones((3, 2)) @ t
    assert isinstance(out, ad.Tensor) and out.shape == (3, 2)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurocert import net as nn
from neurocert.errors import MalformedProblem, ReluNotSupported
from neurocert.expr import Box
from strategies import central_diff, min_relu_margin, random_network, rel_err, sample_box

ACTS = ["tanh", "relu", "square"]
INSTANCES = 100


def _instances(act, seed):
    """Random networks and points, avoiding relu kinks so differences are valid."""
    rng = np.random.default_rng(seed)
    made = 0
    while made < INSTANCES:
        n = int(rng.integers(1, 4))
        depth = int(rng.integers(1, 3))
        net = random_network(rng, n, [act] * depth, n_out=int(rng.integers(1, 3)), scale=0.8)
        X = rng.uniform(-1, 1, size=(3, n))
        if act == "relu" and min_relu_margin(net, X) < 1e-3:
            continue
        made += 1
        yield rng, net, X


def test_forward_examples():
    v = nn.square_network(2)
    assert nn.forward(v, [3.0, 4.0])[0] == 25.0
    assert nn.forward(v, np.array([[1.0, 1.0], [0.0, 2.0]]))[:, 0].tolist() == [2.0, 4.0]
    with pytest.raises(ValueError):
        nn.forward(v, [1.0])


def test_shape_validation():
    with pytest.raises(MalformedProblem):
        nn.NetworkShape(1, ((4, "sigmoid"),))
    with pytest.raises(MalformedProblem):
        nn.Network(nn.NetworkShape(2, (), 1), [np.zeros((1, 3))], [np.zeros(1)])
    assert nn.NetworkShape(3, ((4, "tanh"),), 2).n_params == 4 * 4 + 2 * 5


@pytest.mark.parametrize("act", ACTS)
def test_parameter_gradient_matches_differences(act):
    worst = 0.0
    for rng, net, X in _instances(act, hash(act) % 1000):
        up = rng.normal(size=(X.shape[0], net.shape.output_dim))
        _, grads = nn.backward(net, X, up)
        f = lambda th: float(np.sum(up * nn.forward(net.with_params(th), X)))  # noqa: E731
        worst = max(worst, rel_err(nn.flatten_grads(grads), central_diff(f, net.params())))
    assert worst < 1e-5


@pytest.mark.parametrize("act", ACTS)
def test_input_gradient_matches_differences(act):
    worst = 0.0
    for rng, net, X in _instances(act, 17 + len(act)):
        up = rng.normal(size=(X.shape[0], net.shape.output_dim))
        gx, _ = nn.backward(net, X, up)
        f = lambda flat: float(np.sum(up * nn.forward(net, flat.reshape(X.shape))))  # noqa: E731
        worst = max(worst, rel_err(gx, central_diff(f, X.ravel())))
    assert worst < 1e-5


@pytest.mark.parametrize("act", ["tanh", "square"])
def test_directional_backward_matches_differences(act):
    """Gradient of sum(c * grad V(x) . v) in the parameters and in v."""
    worst = 0.0
    for rng, net, X in _instances(act, 5 + len(act)):
        net = nn.Network(nn.NetworkShape(net.shape.input_dim, net.shape.hidden, 1),
                         net.weights[:-1] + (net.weights[-1][:1],), net.biases[:-1] + (net.biases[-1][:1],))
        Vd = rng.normal(size=X.shape)
        c = rng.normal(size=X.shape[0])
        (dWs, dbs), dV = nn.directional_backward(net, X, Vd, c)
        f = lambda th: float(c @ nn.directional(net.with_params(th), X, Vd))  # noqa: E731
        worst = max(worst, rel_err(nn.flatten_grads((dWs, dbs)), central_diff(f, net.params())))
        g = lambda flat: float(c @ nn.directional(net, X, flat.reshape(X.shape)))  # noqa: E731
        worst = max(worst, rel_err(dV, central_diff(g, Vd.ravel())))
    assert worst < 1e-5


def test_directional_is_gradient_dot_direction():
    rng = np.random.default_rng(0)
    net = random_network(rng, 3, ["tanh", "square"])
    X, V = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    assert np.allclose(nn.directional(net, X, V), np.sum(nn.input_gradient(net, X) * V, axis=1))


@pytest.mark.parametrize("act", ACTS)
def test_interval_forward_soundness(act):
    rng = np.random.default_rng(3)
    for _ in range(20):
        net = random_network(rng, 2, [act, act], n_out=2, scale=1.5)
        lo = rng.uniform(-2, 1, size=2)
        box = Box(tuple(lo), tuple(lo + rng.uniform(0, 1.5, size=2)))
        X = sample_box(box, 10_000, rng)
        Y = nn.forward(net, X)
        ilo, ihi = nn.interval_forward_batch(net, box.lo_array[None], box.hi_array[None])
        assert np.all(Y >= ilo[0]) and np.all(Y <= ihi[0])


@pytest.mark.parametrize("act", ["tanh", "square"])
def test_interval_gradient_soundness(act):
    rng = np.random.default_rng(4)
    for _ in range(20):
        net = random_network(rng, 2, [act, act], scale=1.5)
        lo = rng.uniform(-2, 1, size=2)
        box = Box(tuple(lo), tuple(lo + rng.uniform(0, 1.5, size=2)))
        G = nn.input_gradient(net, sample_box(box, 10_000, rng))
        enc = np.array(nn.interval_input_gradient(net, box))
        assert np.all(G >= enc[:, 0]) and np.all(G <= enc[:, 1])


def test_interval_gradient_rejects_relu():
    net = random_network(np.random.default_rng(0), 1, ["relu"])
    with pytest.raises(ReluNotSupported):
        nn.interval_input_gradient(net, Box((0.0,), (1.0,)))


def test_point_box_enclosure_is_tight():
    rng = np.random.default_rng(5)
    net = random_network(rng, 2, ["tanh", "square"])
    x = np.array([0.3, -0.4])
    (lo, hi), = nn.interval_forward(net, Box(tuple(x), tuple(x)))
    v = nn.forward(net, x)[0]
    assert lo <= v <= hi and hi - lo < 1e-12


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_clamped_outputs_stay_in_box(seed):
    rng = np.random.default_rng(seed)
    clamp = Box((-0.5, 0.0), (0.5, 2.0))
    net = random_network(rng, 2, ["tanh"], n_out=2, clamp=clamp, scale=5.0)
    U = nn.forward(net, rng.uniform(-10, 10, size=(200, 2)))
    assert np.all(U >= clamp.lo_array) and np.all(U <= clamp.hi_array)
    lo, hi = nn.interval_forward_batch(net, np.array([[-10.0, -10.0]]), np.array([[10.0, 10.0]]))
    assert np.all(lo >= clamp.lo_array) and np.all(hi <= clamp.hi_array)


@settings(max_examples=30)
@given(seed=st.integers(0, 2**32 - 1))
def test_weight_file_roundtrip_is_exact(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    clamp = Box((-1.0,), (np.pi,)) if seed % 2 else None
    net = random_network(rng, 3, ["tanh", "relu", "square"][: 1 + seed % 3], clamp=clamp)
    assert nn.loads_network(nn.dumps_network(net)) == net
    path = tmp_path_factory.mktemp("w") / "net.txt"
    nn.save_network(net, path)
    assert nn.load_network(path) == net


def test_weight_file_errors():
    with pytest.raises(MalformedProblem):
        nn.loads_network("not a network\n")
    text = nn.dumps_network(nn.square_network(2)).replace("layer 1", "layer 7")
    with pytest.raises(MalformedProblem):
        nn.loads_network(text)


def test_init_is_reproducible():
    shape = nn.NetworkShape(2, ((5, "tanh"),))
    assert nn.init_network(shape, 3) == nn.init_network(shape, 3)
    assert nn.init_network(shape, 3) != nn.init_network(shape, 4)

import numpy as np
import pytest

from resilient_mlp.linalg import Rng
from resilient_mlp.network import Layer, Mlp, forward


def random_net(topology, seed, bias_scale=0.1, output="sigmoid"):
    rng = Rng(seed)
    net = Mlp.init(topology, rng, output=output)
    for layer in net.layers:
        layer.bias[:] = (2 * rng.uniform(layer.bias.shape) - 1) * bias_scale
    return net


def kink_free_batch(net, n, seed, margin=1e-4, scale=1.0):
    """Inputs whose hidden ReLU pre-activations all stay ``margin`` away from 0."""
    g = np.random.default_rng(seed)
    rows = []
    while len(rows) < n:
        x = g.uniform(-scale, scale, (1, net.topology[0]))
        trace = forward(net, x)
        if all(np.all(np.abs(p) > margin) for l, p in zip(net.layers, trace.pre) if l.activation == "relu"):
            rows.append(x[0])
    return np.array(rows)


def perturb_all(net):
    """Yield (array, index) for every weight and bias entry."""
    for layer in net.layers:
        for arr in (layer.weights, layer.bias):
            for idx in np.ndindex(arr.shape):
                yield arr, idx


def linear_neuron(w=2.0, activation="identity"):
    return Mlp([Layer(np.array([[w]]), np.zeros(1), activation)])


@pytest.fixture
def net432():
    return random_net([4, 3, 2], seed=1)


# -- acceptance verdicts ----------------------------------------------------

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL/SKIP line for the summary, then assert it."""

    def record(number, title, ok, detail):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"[{status}] criterion {number:2d} {title}: {detail}"
        request.config.stash[VERDICTS].append((number, line))
        print(line)
        if ok is None:
            pytest.skip(line)
        assert ok, line

    return record

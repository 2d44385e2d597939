import numpy as np
import pytest
import torch

from trafficflow.geometry import SE3Transform


def numeric_grad(fn, x, step=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. every entry of tensor ``x`` (in place)."""
    grad = torch.zeros_like(x)
    flat = x.data.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        plus = float(fn())
        flat[i] = orig - step
        minus = float(fn())
        flat[i] = orig
        g[i] = (plus - minus) / (2 * step)
    return grad


def rel_error(analytic, numeric):
    """max |a - n| / max(max |a|, max |n|, 1e-6)."""
    a = analytic.detach().double()
    n = numeric.double()
    # floor keeps exactly-zero gradients (e.g. key biases under softmax) from
    # turning round-off noise into a unit relative error
    scale = max(a.abs().max().item(), n.abs().max().item(), 1e-6)
    return (a - n).abs().max().item() / scale


def check_gradients(fn, tensors, step=1e-5):
    """Largest per-tensor relative error between autograd and central differences."""
    for t in tensors:
        t.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    with torch.no_grad():
        for t in tensors:
            analytic = t.grad if t.grad is not None else torch.zeros_like(t)
            worst = max(worst, rel_error(analytic, numeric_grad(fn, t, step)))
    return worst


def random_se3(rng, max_angle=np.pi, max_trans=5.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k
    # re-orthonormalize so the 1e-9 check never trips on rounding
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    return SE3Transform.from_rt(rot, rng.uniform(-max_trans, max_trans, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    torch.manual_seed(0)
    yield
    torch.set_default_dtype(old)


# ------------------------------------------------------ acceptance summary

_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; returns ``passed`` so tests can assert it."""
    def record(number, name, passed, detail=""):
        line = f"CRITERION {number:>2} {'PASS' if passed else 'FAIL'}  {name}  {detail}".rstrip()
        request.config.stash.setdefault(_RESULTS, []).append((number, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

import numpy as np
import pytest

from sparta import tensor as T
from sparta.data import make_synthetic_task
from sparta.model import ModelConfig, init_params, swap_head


def numeric_grad(fn, arrays, eps=1e-3):
    """Central differences of scalar ``fn(*arrays)`` evaluated in float64."""
    arrays = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    grads = []
    with T.precision(np.float64):
        for a in arrays:
            g = np.zeros_like(a)
            it = np.nditer(a, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                old = a[i]
                a[i] = old + eps
                hi = float(fn(*[T.Tensor(x) for x in arrays]).data)
                a[i] = old - eps
                lo = float(fn(*[T.Tensor(x) for x in arrays]).data)
                a[i] = old
                g[i] = (hi - lo) / (2 * eps)
            grads.append(g)
    return grads


def autodiff_grad(fn, arrays):
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        out = fn(*leaves)
        tape.backward(out)
    return [x.grad for x in leaves]


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


def check_grads(fn, arrays, tol=1e-3, eps=1e-3):
    ad = autodiff_grad(fn, arrays)
    fd = numeric_grad(fn, arrays, eps)
    errs = [rel_err(a, f) for a, f in zip(ad, fd)]
    assert max(errs) < tol, errs
    return errs


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(vocab_size=64, hidden_dim=16, num_layers=2, num_heads=2, head_dim=8,
                       mlp_dim=32, max_seq_len=16)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=0)


@pytest.fixture
def cls_params(tiny_params):
    return swap_head(tiny_params, 2, seed=1)


@pytest.fixture(scope="session")
def keyword_task():
    return make_synthetic_task("keyword-sentiment", (256, 64, 64), seed=0)


@pytest.fixture(scope="session")
def task_params(keyword_task):
    cfg = ModelConfig(vocab_size=len(keyword_task.vocab), hidden_dim=32, num_layers=2,
                      num_heads=4, head_dim=8, mlp_dim=64, max_seq_len=16)
    return swap_head(init_params(cfg, seed=0), keyword_task.num_classes, seed=0)


ACCEPTANCE = []


def record_acceptance(number, title, ok, detail):
    line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)

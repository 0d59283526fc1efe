import time

import numpy as np
import pytest


def conv_reference(x, w, b, stride=1, pad=0):
    """Six nested loops, float64."""
    x = np.pad(np.asarray(x, np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = float(b[o])
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += x[bi, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[bi, o, i, j] = acc
    return out


def numerical_grad(f, x, h=1e-3):
    """Central differences of scalar f at float64 array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- shared expensive fixtures --------------------------------------------------------

TEACHER_EPOCHS = {"cnn-s": 30, "cnn-m": 15}
PRETRAIN_SECONDS: dict[str, float] = {}


@pytest.fixture(scope="session")
def shapes():
    from resmatch.data import gen_synthetic

    return gen_synthetic(0)


def _pretrained(shapes, arch):
    from resmatch.models import ModelSpec, PretrainHyper, build_model, pretrain

    spec = ModelSpec(arch, shapes.train.input_dims, shapes.train.num_classes)
    hyper = PretrainHyper(epochs=TEACHER_EPOCHS[arch], seed=0)
    start = time.perf_counter()
    model = pretrain(build_model(spec, 0), shapes.train, hyper, shapes.test)
    PRETRAIN_SECONDS[arch] = time.perf_counter() - start
    return model


@pytest.fixture(scope="session")
def teacher_s(shapes):
    return _pretrained(shapes, "cnn-s")


@pytest.fixture(scope="session")
def teacher_m(shapes):
    return _pretrained(shapes, "cnn-m")


# -- acceptance summary -----------------------------------------------------------------

ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)

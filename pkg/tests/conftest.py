import numpy as np
import pytest

from sgmoe.model import Dataset, ModelSpec, Theta


def random_theta(rng, spec, scale=1.0):
    return Theta(spec, scale * rng.standard_normal(spec.gate_shape), scale * rng.standard_normal(spec.expert_shape))


def random_spec(rng, Ks=(2, 3, 4), Ms=(2, 3, 4), Ps=(1, 2), Ds=(1, 2)):
    return ModelSpec(K=int(rng.choice(Ks)), M=int(rng.choice(Ms)), P=int(rng.choice(Ps)), D=int(rng.choice(Ds)))


def random_data(rng, spec, N):
    x = rng.standard_normal((N, spec.P))
    y = rng.integers(1, spec.M + 1, size=N)
    return Dataset(x, y, spec.M)


def perturb(rng, theta, scale):
    return Theta(
        theta.spec,
        theta.gate + scale * rng.standard_normal(theta.spec.gate_shape),
        theta.experts + scale * rng.standard_normal(theta.spec.expert_shape),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

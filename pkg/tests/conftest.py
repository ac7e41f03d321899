import numpy as np
import pytest

from flamegrad.params import (
    AffineMap,
    FlameParams,
    FlameSpec,
    GeneratorParams,
    SceneParams,
    SceneSpec,
    Variation,
    init_random,
)


def make_flame(affines, variation=Variation.LINEAR, beta_raw=0.5413248546129181, colors=None, final=None):
    gens = tuple(GeneratorParams(AffineMap(*a), Variation(variation)) for a in affines)
    if colors is None:
        colors = tuple((i / len(gens), 0.5, 1 - i / len(gens), 1.0) for i in range(len(gens)))
    return FlameParams(gens, beta_raw, final or AffineMap(), colors)


def scene_of(*flames, background=(1.0, 1.0, 1.0), learnable=False):
    return SceneParams(tuple(flames), background, learnable)


def random_scene(seed, n=4, variation="linear", flames=1, learnable=False):
    bg = None if learnable else (1.0, 1.0, 1.0)
    return init_random(seed, SceneSpec((FlameSpec.uniform(n, variation),) * flames, bg))


def central_difference(f, x, h=1e-6):
    """Numerical gradient of scalar f at vector x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi.flat[i] += h
        lo.flat[i] -= h
        g.flat[i] = (f(hi) - f(lo)) / (2 * h)
    return g


SIERPINSKI = [
    (0.5, 0.0, -0.5, 0.0, 0.5, -0.5),
    (0.5, 0.0, 0.5, 0.0, 0.5, -0.5),
    (0.5, 0.0, 0.0, 0.0, 0.5, 0.5),
]


@pytest.fixture
def sierpinski():
    return make_flame(SIERPINSKI)


# acceptance criteria report: test_acceptance appends (criterion, passed, detail)
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0].split(".")[0])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")

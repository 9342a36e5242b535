import numpy as np
import pytest

from mergelab.checkpoint import write_container


def random_model(gen, shapes, scale=1.0):
    return {name: (scale * gen.standard_normal(shape)).astype(np.float32) for name, shape in shapes.items()}


def random_gram(gen, d):
    Z = gen.standard_normal((3 * d, d))
    return (Z.T @ Z / (3 * d)).astype(np.float32)


SHAPES = {"a.weight": (4, 3), "a.bias": (3,), "b.weight": (3, 5)}


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


@pytest.fixture
def merge_inputs(gen):
    """Three constituents, base, and full statistics (fisher, gram, trim)."""
    base = random_model(gen, SHAPES)
    models = [{n: (v + 0.3 * gen.standard_normal(v.shape)).astype(np.float32) for n, v in base.items()} for _ in range(3)]
    stats = []
    for _ in models:
        s = {f"fisher/{n}": np.abs(gen.standard_normal(shape)).astype(np.float32) for n, shape in SHAPES.items()}
        s["gram/a.weight"] = random_gram(gen, 4)
        s["gram/b.weight"] = random_gram(gen, 3)
        stats.append(s)
    return models, base, stats


@pytest.fixture
def merge_files(tmp_path, merge_inputs):
    models, base, stats = merge_inputs
    paths = []
    for i, m in enumerate(models):
        paths.append(str(tmp_path / f"m{i}.ckpt"))
        write_container(m, paths[-1])
    base_path = str(tmp_path / "base.ckpt")
    write_container(base, base_path)
    stat_paths = []
    for i, s in enumerate(stats):
        stat_paths.append(str(tmp_path / f"s{i}.ckpt"))
        write_container(s, stat_paths[-1])
    return paths, base_path, stat_paths


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance_report(request):
    """Record one 'criterion N: PASS/FAIL ...' line for the terminal summary."""
    lines = request.config._acceptance_lines

    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

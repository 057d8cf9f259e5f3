import numpy as np
import pytest

from dnrf import _backend, _fallback, bvh, encoding, network, renderer
from dnrf.dataset import generate_synthetic_scene, load_scene
from dnrf.encoding import HashGridConfig

BACKENDS = ["fallback"] + (["compiled"] if _backend.compiled is not None else [])
_MODULES = (bvh, encoding, network, renderer)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run the test once per available kernel implementation."""
    impl = _fallback if request.param == "fallback" else _backend.compiled
    for mod in _MODULES:
        monkeypatch.setattr(mod, "kernels", impl)
    return impl


@pytest.fixture(scope="session")
def tiny_scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene") / "tiny"
    generate_synthetic_scene(root, seed=3, frames=4, resolution=16, amplitude=0.15)
    return root


@pytest.fixture(scope="session")
def tiny_scene(tiny_scene_dir):
    return load_scene(tiny_scene_dir)


@pytest.fixture
def small_grid():
    return HashGridConfig(levels=4, table_size=2**10, features_per_entry=2, base_resolution=4,
                          finest_resolution=32)


def random_mesh(rng, n_faces, spread=1.0, size=0.1):
    """Triangle soup with ``n_faces`` random, well-shaped faces."""
    centers = rng.uniform(-spread, spread, (n_faces, 1, 3))
    offsets = rng.normal(size=(n_faces, 3, 3)) * size
    tris = centers + offsets
    from dnrf.geometry import TriangleMesh

    return TriangleMesh.from_arrays(tris.reshape(-1, 3), np.arange(3 * n_faces).reshape(-1, 3))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

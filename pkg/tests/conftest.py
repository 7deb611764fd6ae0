import numpy as np
import pytest

from mspfn.data import make_dataset, procedural_scene, save_image


def build_pairs(root, count, seed=1, size=64):
    """Write ``count`` procedural clean scenes and their synthetic rain pairs under ``root``."""
    clean = root / "clean_src"
    clean.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        save_image(procedural_scene(100 + i, size, size), clean / f"scene_{i:02d}.png")
    manifest, path = make_dataset(clean, root / "pairs", count, seed=seed)
    return manifest, path


@pytest.fixture(scope="session")
def tiny_pairs(tmp_path_factory):
    return build_pairs(tmp_path_factory.mktemp("tiny_pairs"), 4)


@pytest.fixture(autouse=True)
def _quiet_numpy():
    with np.errstate(over="raise", invalid="raise"):
        yield

import numpy as np
import pytest

from taxengine import build, parse_path


@pytest.fixture
def chain_tax():
    """Single chain A -> B -> C."""
    return build([parse_path("A > B > C")])


@pytest.fixture
def two_branch_tax():
    """A -> {B, C}, D -> E; level-2 order [B, C, E, STOP]."""
    return build([parse_path("A > B"), parse_path("A > C"), parse_path("D > E")])


@pytest.fixture
def apparel_tax():
    """Single-root, depth-3 tree suitable for the classifier."""
    paths = [
        "Apparel > Clothing > Shirts",
        "Apparel > Clothing > Pants",
        "Apparel > Clothing > Outerwear",
        "Apparel > Shoes",
        "Apparel > Accessories > Belts",
        "Apparel > Accessories > Hats",
    ]
    return build([parse_path(p) for p in paths])


def make_random_taxonomy(rng: np.random.Generator, max_depth=4, max_children=4):
    """Random single-root taxonomy for property tests."""
    paths = []
    n_l2 = rng.integers(1, max_children + 1)
    for i in range(n_l2):
        base = ["R", f"c{i}"]
        paths.append(" > ".join(base))
        if max_depth >= 3 and rng.random() < 0.8:
            for j in range(rng.integers(1, max_children + 1)):
                deeper = base + [f"c{i}.{j}"]
                paths.append(" > ".join(deeper))
                if max_depth >= 4 and rng.random() < 0.5:
                    for k in range(rng.integers(1, 3)):
                        paths.append(" > ".join(deeper + [f"c{i}.{j}.{k}"]))
    return build([parse_path(p) for p in sorted(set(paths))])

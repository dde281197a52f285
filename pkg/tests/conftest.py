import numpy as np
import pytest

from pvcrack import dataset, synthetic

# Small fixture for fast tests; every (type, label) cell is >= 5 so k=5
# stratified folds stay valid.
SMALL_COUNTS = {
    ("mono", "P00"): 24, ("mono", "P03"): 6,
    ("mono", "P06"): 6, ("mono", "P10"): 14,
    ("poly", "P00"): 30, ("poly", "P03"): 6,
    ("poly", "P06"): 6, ("poly", "P10"): 16,
}


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("elpv-small")
    synthetic.generate_elpv_fixture(root, counts=SMALL_COUNTS, seed=11)
    return root


@pytest.fixture(scope="session")
def small_cells(small_root):
    return dataset.load_elpv(small_root)


@pytest.fixture(scope="session")
def full_root(tmp_path_factory):
    """ELPV-layout tree with the public per-(type, label) counts."""
    root = tmp_path_factory.mktemp("elpv-full")
    synthetic.generate_elpv_fixture(root, seed=5)
    return root


def make_separable_dataset(n: int = 40, seed: int = 3) -> dataset.LabeledDataset:
    """Bright cells (class 0) vs dark cells (class 1); trivially learnable."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        cls = i % 2
        base = 60 if cls else 200
        pixels = np.clip(
            base + rng.integers(-20, 21, (dataset.IMAGE_SIDE, dataset.IMAGE_SIDE)),
            0, 255).astype(np.uint8)
        img = dataset.CellImage(f"synt{i:03d}.png", pixels, "mono",
                                "P10" if cls else "P00")
        samples.append((img, cls))
    return dataset.LabeledDataset("SYN", tuple(samples), (), num_classes=2)

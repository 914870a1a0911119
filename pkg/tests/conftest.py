import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from bcl import dataio
from bcl.config import from_dict


@pytest.fixture(scope="session")
def tiny_pool(tmp_path_factory):
    """16x16 shape pool (8 train, 4 test per class) written as record files."""
    root = tmp_path_factory.mktemp("tiny_pool")
    pool, test = dataio.make_shape_pool(8, 4, seed=0, size=16)
    dataio.save_dataset(root / "pool.bin", pool)
    dataio.save_dataset(root / "test.bin", test)
    return root


@pytest.fixture
def tiny_config(tiny_pool, tmp_path):
    def make(method="simclr", out="run", **overrides):
        doc = {
            "method": method,
            "dataset": {"pool": str(tiny_pool / "pool.bin"), "test": str(tiny_pool / "test.bin"),
                        "height": 16, "width": 16},
            "imbalance_factor": 4,
            "epochs": 3,
            "batch_size": 16,
            "model": {"channels": [4, 8], "hidden_dim": 16, "embed_dim": 8},
            "optim": {"name": "adam", "lr": 1e-3, "weight_decay": 1e-6},
            "probe": {"shots": 4, "epochs": 5, "batch_size": 16},
            "out_dir": str(tmp_path / out),
        }
        for key, value in overrides.items():
            section, _, leaf = key.partition("__")
            if leaf:
                doc.setdefault(section, {})[leaf] = value
            else:
                doc[key] = value
        return from_dict(doc).validate()
    return make

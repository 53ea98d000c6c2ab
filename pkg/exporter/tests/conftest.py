import numpy as np
import pytest

from dmb_exporter import save_toy_checkpoint, toy_calibration


@pytest.fixture(scope="session")
def toy_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "toy.pt"
    save_toy_checkpoint(path, seed=0)
    return str(path)


@pytest.fixture(scope="session")
def calib_npy(tmp_path_factory):
    path = tmp_path_factory.mktemp("calib") / "calib.npy"
    np.save(path, toy_calibration(8, seed=1))
    return str(path)

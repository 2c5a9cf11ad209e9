import numpy as np
import pytest

from nsf import schema as sc
from nsf.volume import IntensityVolume, LabelVolume


@pytest.fixture
def toy_schema():
    return sc.toy_schema()


@pytest.fixture
def full_schema():
    return sc.default_schema()


def sphere_labels(n=17, radius=5.0, rim_label=2, core_label=1, lesion=True, hippo_radius=2.5):
    """Side-consistent toy label map: left ids on the low-x half.

    Layout matches the toy schema: 1 = WM core, 2 = GM rim, 3/4 = left/right
    hippocampus blobs, 5 = a WMH rim patch.
    """
    idx = np.indices((n, n, n)).astype(float)
    r = np.sqrt(((idx - (n - 1) / 2) ** 2).sum(0))
    lab = np.zeros((n, n, n), dtype=np.int32)
    lab[r < radius + 2] = rim_label
    lab[r < radius] = core_label
    if hippo_radius:
        lab[(idx[0] < (n - 1) / 2) & (r < hippo_radius)] = 3
        lab[(idx[0] > (n - 1) / 2) & (r < hippo_radius)] = 4
    if lesion:
        lab[(r > radius) & (r < radius + 1) & (idx[2] > 0.7 * n)] = 5
    return lab


@pytest.fixture
def toy_labels():
    return LabelVolume.from_spacing(sphere_labels())


@pytest.fixture
def toy_pair(toy_labels):
    lab = toy_labels.data
    idx = np.indices(lab.shape).astype(float)
    img = 100.0 + 30.0 * (lab == 1) + 60.0 * (lab == 2) + 5.0 * np.sin(idx[1] / 3.0)
    return IntensityVolume.from_spacing(img), toy_labels

import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from anomaly_recon.phantom import AnomalySpec, PhantomConfig, generate_phantom

torch.set_num_threads(max(1, os.cpu_count() or 1))


@pytest.fixture(scope="session")
def normal_phantom():
    vol, labels = generate_phantom(PhantomConfig(seed=11))
    vol.id = "fixture_normal"
    return vol, labels


@pytest.fixture(scope="session")
def blob_phantom():
    cfg = PhantomConfig(
        seed=12,
        anomalies={
            "metastatic_tumor_analog": AnomalySpec(
                count_range=(2, 2), radius_range=(3.0, 4.0), offset_range=(0.4, 0.5)
            )
        },
    )
    vol, labels = generate_phantom(cfg)
    vol.id = "fixture_blob"
    return vol, labels


@pytest.fixture(scope="session")
def train_slices_small():
    """A small bank of preprocessed normal slices for training smoke tests."""
    from anomaly_recon.preprocess import HistogramReference, decompose_and_crop, histogram_match, renormalize

    vols = []
    for i in range(3):
        v, _ = generate_phantom(PhantomConfig(seed=40 + i))
        v.id = f"bank_{i}"
        vols.append(v)
    reference = HistogramReference.from_volumes(vols)
    out = []
    for v in vols:
        matched = histogram_match(v, reference)
        for k, plane in enumerate(decompose_and_crop(matched, 64)):
            if plane.max() > plane.min():
                out.append(renormalize(plane, source_id=v.id, index_k=k).data)
    return np.stack(out)

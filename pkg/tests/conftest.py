import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ct2pet.volume import Condition, DistrictLabelMask, Modality, PatientRecord, Unit, Volume

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_patient(labels, ct=None, pet=None, lesion=None, pid="p0", condition=Condition.NEGATIVE_CONTROL):
    labels = np.asarray(labels, dtype=np.uint8)
    rng = np.random.default_rng(0)
    if ct is None:
        ct = np.where(labels > 0, rng.uniform(0.2, 0.8, labels.shape), 0.0)
    if pet is None:
        pet = np.where(labels > 0, 0.5 * ct, 0.0)
    return PatientRecord(
        pid,
        Volume(np.asarray(ct, dtype=np.float32), modality=Modality.CT, unit=Unit.NORMALIZED),
        DistrictLabelMask(labels),
        Volume(np.asarray(pet, dtype=np.float32), modality=Modality.PET, unit=Unit.NORMALIZED),
        lesion, condition)


def slab_labels(dims=(40, 40, 72)):
    """Four districts stacked along z with a background margin."""
    labels = np.zeros(dims, dtype=np.uint8)
    z = dims[2]
    edges = np.linspace(2, z - 2, 5).astype(int)
    for d in range(4):
        labels[3:-3, 3:-3, edges[d]:edges[d + 1]] = 4 - d
    return labels


@pytest.fixture
def slab_patient():
    return make_patient(slab_labels())


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])

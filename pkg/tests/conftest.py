from __future__ import annotations

import numpy as np
import pytest

from defectloop.annotations import (
    AnnotationSet,
    BoxAnnotation,
    DefectClass,
    MaskAnnotation,
    human_source,
)
from defectloop.storage import DataStore


def pytest_runtest_logreport(report):
    """One visible PASS/FAIL line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    outcome = "PASS" if report.passed else "FAIL"
    print(f"\nACCEPTANCE {outcome}: {name}")


@pytest.fixture
def store(tmp_path):
    return DataStore(tmp_path / "data")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_mask(rng: np.random.Generator, height: int, width: int, p: float = 0.4) -> np.ndarray:
    return rng.random((height, width)) < p


def human_set(
    labeler: str,
    image_id: str = "img",
    mask: np.ndarray | None = None,
    boxes: tuple[BoxAnnotation, ...] = (),
    defect_class: DefectClass = DefectClass.POLYCRYSTALLINE,
) -> AnnotationSet:
    masks = ()
    if mask is not None:
        masks = (MaskAnnotation.from_array(defect_class, mask),)
    return AnnotationSet(image_id=image_id, source=human_source(labeler), masks=masks, boxes=boxes)

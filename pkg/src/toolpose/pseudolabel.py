"""Visible-object pseudo-label masks from a CAD model, a known pose and observed depth.

The model is rendered at its ground-truth pose; a covered pixel survives
only if the observed depth there is valid and agrees with the rendered
depth to strictly better than `epsilon`. Pixels behind an occluder fail the
test and drop out, leaving the visible part of the object.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from toolpose.geometry import CameraIntrinsics, RigidTransform
from toolpose.maps import BinaryMask, DepthMap
from toolpose.mesh import TriangleMesh
from toolpose.render import render_depth


@dataclass(frozen=True)
class PseudoLabelParams:
    epsilon: float = 1.0  # mm

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class PseudoLabelReport:
    projected_pixels: int
    retained_pixels: int
    rejected_occluded: int
    rejected_no_depth: int

    def __post_init__(self):
        total = self.retained_pixels + self.rejected_occluded + self.rejected_no_depth
        if total != self.projected_pixels:
            raise ValueError(f"report tallies do not add up: {total} != {self.projected_pixels}")

    def to_json(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def depth_consistency_mask(rendered: DepthMap, observed: DepthMap, epsilon: float):
    """Apply |Z_rendered - Z_observed| < epsilon on rendered pixels.

    Returns (retained, occluded, no_depth) boolean rasters partitioning the
    rendered coverage. "occluded" means observed depth exists but disagrees
    (by far the most common cause is an occluder in front).
    """
    covered = rendered.valid
    has_depth = covered & observed.valid
    close = np.abs(rendered.values - observed.values) < epsilon
    retained = has_depth & close
    return retained, has_depth & ~close, covered & ~observed.valid


def generate_pseudo_mask(mesh: TriangleMesh, gt_pose: RigidTransform, intr: CameraIntrinsics,
                         observed_depth: DepthMap, params: PseudoLabelParams | None = None
                         ) -> tuple[BinaryMask, PseudoLabelReport]:
    params = params or PseudoLabelParams()
    if observed_depth.shape != intr.shape:
        raise ValueError(
            f"observed depth is {observed_depth.width}x{observed_depth.height}, "
            f"camera is {intr.width}x{intr.height}"
        )
    rendered = render_depth(mesh, gt_pose, intr).depth
    retained, occluded, no_depth = depth_consistency_mask(rendered, observed_depth, params.epsilon)
    report = PseudoLabelReport(
        projected_pixels=int(rendered.valid.sum()),
        retained_pixels=int(retained.sum()),
        rejected_occluded=int(occluded.sum()),
        rejected_no_depth=int(no_depth.sum()),
    )
    return BinaryMask(retained), report

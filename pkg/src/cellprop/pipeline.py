"""Image -> instance labeling: detect, propagate, project, cut, fuse."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contribution import ContributionStack, contribution_stack
from .detector import infer
from .graphcut import GraphCutParams, SegmentationReport, segment_image
from .nn import Network
from .peaks import CenterRegion, detect_centers


@dataclass
class PipelineResult:
    likelihood: np.ndarray
    regions: list[CenterRegion]
    stack: ContributionStack
    masks: np.ndarray
    labels: np.ndarray
    report: SegmentationReport


def run(net: Network, image, threshold: float = 0.3, params: GraphCutParams = GraphCutParams(),
        modality: str = "phase-contrast", jobs: int = 1) -> PipelineResult:
    image = np.asarray(image, dtype=float)
    y, trace = infer(net, image)
    regions = detect_centers(y, threshold)
    stack = contribution_stack(net, trace, y, regions)
    labels, masks, report = segment_image(image, stack, params, modality, jobs)
    return PipelineResult(y, regions, stack, masks, labels, report)

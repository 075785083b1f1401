"""End-to-end inference on one volume."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import preprocess as pp
from .net.model import NetworkParams, drn_forward
from .postprocess import ExtractConfig, extract_detections
from .volume_io import DetectionSet, Volume


@dataclass
class InferenceResult:
    detections: DetectionSet
    prob_map: Volume
    seconds: float


def infer_volume(net: NetworkParams, volume: Volume, center_mm=None, voi_shape=None,
                 spacing_mm: float | None = None, clamp=None,
                 extract: ExtractConfig = ExtractConfig(), backend=None) -> InferenceResult:
    """Preprocess ``volume`` like the training data, predict its map and extract seeds.

    Defaults come from the checkpoint metadata (VOI shape, spacing, clamp);
    the VOI is centred on ``center_mm`` or on the volume centre. The input
    volume is not modified.
    """
    t0 = time.perf_counter()
    meta = net.meta
    clamp = tuple(clamp or meta.get("clamp", pp.HU_CLAMP))
    spacing = spacing_mm or meta.get("voi_spacing_mm", pp.DEFAULT_SPACING_MM)
    shape = tuple(voi_shape or net.arch.input_shape or pp.DEFAULT_VOI_SHAPE)
    center = pp.volume_center_mm(volume) if center_mm is None else np.asarray(center_mm, float)
    voi = pp.VoiSpec(tuple(float(c) for c in center), shape, spacing)
    crop = pp.prepare_input(volume, voi, clamp)
    x = crop.with_data(pp.normalize_intensity(crop, *clamp))
    prob = drn_forward(net, x, backend=backend)
    prob = prob.with_data(np.maximum(prob.data, 0.0))
    dets = extract_detections(prob, extract)
    return InferenceResult(dets, prob, time.perf_counter() - t0)

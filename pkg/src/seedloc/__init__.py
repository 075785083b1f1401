"""Localization of implanted seeds in CT-like volumes by density-map regression."""
from .evaluation import EvalReport, aggregate, evaluate, greedy_match
from .phantom import PhantomConfig, generate_dataset, generate_phantom
from .pipeline import InferenceResult, infer_volume
from .postprocess import ExtractConfig, extract_detections
from .targetmap import KernelSpec, build_target_map
from .volume_io import (AnnotationSet, Checkpoint, DetectionSet, FormatError, Volume, load_checkpoint,
                        read_annotations, read_detections, read_volume, save_checkpoint,
                        write_annotations, write_detections, write_volume)

__version__ = "0.1.0"

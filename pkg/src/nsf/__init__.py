"""NeuroSynthForge: contrast- and resolution-agnostic brain MRI segmentation toolkit."""

__version__ = "0.1.0"

from .backend import ACTIVE_BACKEND
from .generator import GeneratorConfig, SynthSample, TrainingPair, generate_sample
from .inference import ExternalPredictor, StubPredictor, evaluate_dataset, segment
from .metrics import PredictionBundle, composite_loss, hard_dice, pearson_correlation, roi_volumes
from .schema import LabelSchema, default_schema, load_schema, save_schema, schema_hash, toy_schema
from .volume import (
    DeformationField,
    IntensityVolume,
    LabelVolume,
    apply_deformation,
    flip_lr,
    make_affine,
    resample,
    resample_labels,
)

"""Screen-camera robust watermarking with a simulation-to-real noise layer."""

from .core import (
    ConfigError,
    LossWeights,
    NoiseOpConfig,
    NoisePipelineConfig,
    RunConfig,
    UnpairedDataset,
    denormalize,
    load_config,
    load_unpaired_dataset,
    normalize,
    resize,
)
from .simnoise import (
    NoiseOperatorPair,
    apply_pipeline,
    capture_standin_config,
    compose_operator_pairs,
    pipeline_config,
)
from .translator import DiscriminatorNet, GeneratorNet, interpolate_samples
from .watermark import DecoderNet, EncoderNet, ber, decode, encode, resolution_scale_embed

__version__ = "0.1.0"

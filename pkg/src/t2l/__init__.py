"""t2l: zero-shot text-driven layered editing of images and atlas videos.

A generator is trained on a single input (image, or one layer of a
pre-exported layered-atlas video) to produce an RGBA edit layer that is
composited over the original, guided entirely by text prompts through a
frozen vision-language embedding model.
"""

from .compositing import (
    GREEN,
    EditLayer,
    Image,
    ShapeError,
    TextBundle,
    composite,
    green_screen_composite,
)
from .dataset import (
    TEXT_TEMPLATES,
    AugmentationConfig,
    InternalExample,
    TextTemplateBank,
    augment_image,
    augment_text,
    clip_views,
    sample_example,
)
from .generator import GeneratorConfig, GeneratorState, build, forward
from .losses import (
    LossReport,
    LossTerms,
    LossToggles,
    LossWeights,
    bootstrap_loss,
    composition_loss,
    screen_loss,
    self_similarity,
    sparsity_loss,
    structure_loss,
    total_loss,
)
from .training import (
    Madgrad,
    TrainConfig,
    TrainRunRecord,
    bootstrap_weight_at,
    checkpoint,
    lr_at,
    restore,
    train_image,
)

__version__ = "0.1.0"

__all__ = [
    "GREEN",
    "EditLayer",
    "Image",
    "ShapeError",
    "TextBundle",
    "composite",
    "green_screen_composite",
    "TEXT_TEMPLATES",
    "AugmentationConfig",
    "InternalExample",
    "TextTemplateBank",
    "augment_image",
    "augment_text",
    "clip_views",
    "sample_example",
    "GeneratorConfig",
    "GeneratorState",
    "build",
    "forward",
    "LossReport",
    "LossTerms",
    "LossToggles",
    "LossWeights",
    "bootstrap_loss",
    "composition_loss",
    "screen_loss",
    "self_similarity",
    "sparsity_loss",
    "structure_loss",
    "total_loss",
    "Madgrad",
    "TrainConfig",
    "TrainRunRecord",
    "bootstrap_weight_at",
    "checkpoint",
    "lr_at",
    "restore",
    "train_image",
    "__version__",
]

"""Self-correcting prompt-based segmentation.

A compact segmentation model with SAM-style factorization (image encoder,
sparse/dense prompt encoders, mask decoder) plus an error decoder that
predicts where the current mask is wrong. At inference the model corrects
its own coarse mask, derives point/box/mask prompts from the correction,
and iteratively refines its prediction with an early stop.
"""

from cosam.errors import ConfigError, DataError, InputError, NumericError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "InputError",
    "NumericError",
    "__version__",
]

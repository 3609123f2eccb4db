"""Self-supervised audio encoder built on bidirectional selective state-space blocks.

Submodules: ``numerics`` (arrays and reverse-mode gradients), ``features``
(log-mel front end), ``ssm`` (discretization, scans, the Mamba block),
``model`` (patch encoder, heads, losses), ``training`` (pretraining,
fine-tuning, checkpoints), ``bench`` (scaling sweep) and ``cli``.
"""

from .model import PRESETS, EncoderModel, ModelConfig, count_params, preset

__version__ = "0.1.0"

__all__ = ["PRESETS", "EncoderModel", "ModelConfig", "count_params", "preset", "__version__"]

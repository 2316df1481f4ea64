"""Domain Contrast transfer-learning toolkit.

Feature-space domain adaptation with a bidirectional cross-domain contrast
loss, numerical error-bound verification, an adapter training pipeline with
pseudo-label fine-tuning, and triplet/MMD baselines.
"""

__version__ = "0.1.0"

from .losses import (
    FeatureBatch,
    LossConfig,
    LossValue,
    dc_loss,
    dc_loss_grad,
    mmd_rbf,
    triplet_loss,
)

__all__ = [
    "FeatureBatch",
    "LossConfig",
    "LossValue",
    "dc_loss",
    "dc_loss_grad",
    "mmd_rbf",
    "triplet_loss",
    "__version__",
]

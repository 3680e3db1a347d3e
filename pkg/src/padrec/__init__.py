"""padrec: pre-train / align / fine-tune sequential recommendation.

Library layout:
  autodiff   reverse-mode tensor engine (numpy storage, explicit tape)
  optim      AdamW with decoupled weight decay
  kernels    kernel functions, MK-MMD estimators, InfoNCE
  model      embedding bank, encoders, triple experts, frequency gating
  data       TSV logs, leave-one-out split, text-embedding files, synth worlds
  pipeline   the three training phases plus checkpoints
  evaluate   whole-catalog ranking metrics and embedding-drift diagnostics
  cli        the `padrec` command
"""

from .autodiff import (
    Tape,
    Tensor,
    bce_with_logits,
    derive_seed,
    grad_check,
    make_rng,
    no_grad,
    set_default_dtype,
    stop_gradient,
)
from .optim import AdamW

__all__ = [
    "Tape",
    "Tensor",
    "AdamW",
    "bce_with_logits",
    "derive_seed",
    "grad_check",
    "make_rng",
    "no_grad",
    "set_default_dtype",
    "stop_gradient",
]

__version__ = "0.1.0"

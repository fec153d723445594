"""Mutual-information regularized extractive QA at desk scale.

Subpackages:

- ``autodiff``: dense float64 tensors with a reverse-mode tape.
- ``mi``: bilinear discriminator and MI lower-bound objectives.
- ``regularizer``: local/global MI constraints and the combined penalty.
- ``model``: small transformer span-prediction encoder plus optimizer.
- ``corpus``: synthetic QA corpus generator with distractor sentences.
- ``harness``: training, evaluation and ablation drivers.
- ``cli``: command-line entry points.
"""

__version__ = "0.1.0"

"""Draft-verify-refine image generation on a synthetic shapes world.

A from-scratch rectified-flow model (hand-written gradients) learns to draw
symbolic scenes; generation runs in three stages: sketch a low-resolution
draft from the prompt, verify it with a trained structured-prediction head,
then refine it into the final image under nested classifier-free guidance
over the prompt / draft-feature / verification condition lattice.
"""

from . import basis, datagen, flowcore, guidance, pipeline, scenes  # noqa: F401

__version__ = "0.1.0"

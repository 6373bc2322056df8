"""Temporal saliency toolkit.

Subpackages by concern: ``autodiff`` (taped float64 tensors),
``gaze`` (fixation data, slicing, rasterization, map files),
``metrics`` (saliency agreement scores), ``analysis`` (temporal
structure statistics), ``model`` (the trainable network), ``synth``
(synthetic gaze scenes), ``cli`` (command-line entry point).
"""

__version__ = "0.1.0"

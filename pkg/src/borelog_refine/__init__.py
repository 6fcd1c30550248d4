"""Annotation-free multimodal borehole-image segmentation.

Pseudo-label construction from raw and denoised acoustic amplitudes,
per-pixel confidence estimation, a family of learned refiners up to
confidence-gated depth-aware cross-attention, and a permutation-invariant
evaluation suite, orchestrated by the ``borelog-refine`` CLI.
"""

__version__ = "0.1.0"

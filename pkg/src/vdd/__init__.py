"""Distilling score-based teachers into conditional Gaussian mixtures of experts.

Submodules: ``prob`` (Gaussian/categorical primitives), ``sde`` (noise
schedules, analytic teachers, reverse-SDE sampling), ``scorenet`` (small
score network and denoising score matching), ``moe`` (the student model),
``train`` (variational distillation), ``em`` (maximum-likelihood baseline),
``tasks`` and ``metrics`` (toy tasks and evaluation), ``io``, ``plots`` and
``cli``.
"""
__version__ = "0.1.0"

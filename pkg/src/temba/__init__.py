"""Dilated selective state-space sequence labeling.

A self-contained library for dense per-frame sequence labeling (action
detection and importance scoring) built on input-dependent state-space
blocks with per-block temporal dilation and multi-scale fusion, trained
with a composite of frame BCE, a projection-consistency penalty, and
per-block auxiliary supervision. Ships its own reverse-mode autodiff, a
compiled scan core with a numpy fallback, binary feature/checkpoint
formats, a synthetic data generator, and a training/evaluation CLI.
"""

__version__ = "0.1.0"

"""Learned image codec with attention-based global hyperprior, per-position local hyperprior
and an autoregressive context model, built on a small numpy autodiff core."""

__version__ = "0.1.0"

"""Vision-only diffusion policy: numpy autodiff core, encoders, toy environment, training and evaluation."""

__version__ = "0.1.0"

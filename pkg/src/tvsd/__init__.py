"""Time-varying prosody style codec, latent diffusion and one-step distillation on numpy."""

__version__ = "0.1.0"

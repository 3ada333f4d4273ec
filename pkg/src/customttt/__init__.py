"""Desk-scale video-diffusion customization lab: selective-layer LoRA, prompt-injection analysis and test-time adapter combination."""

__version__ = "0.1.0"

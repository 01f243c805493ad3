"""Streaming audio-driven motion generation at desk scale.

Causal music features condition a windowed flow-matching denoiser that is
sampled through a FIFO streaming loop with temporal guidance, driving a
skeletal character one frame per audio tick at 30 Hz.
"""

__version__ = "0.1.0"

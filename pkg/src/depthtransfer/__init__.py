"""Non-parametric depth transfer for images and video, with stereo synthesis."""

__version__ = "0.1.0"

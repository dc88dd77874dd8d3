"""Region-controlled multi-subject text-to-video diffusion at toy scale."""

__version__ = "0.1.0"

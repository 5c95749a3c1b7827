"""Native-resolution detector for AI-generated video, at desk scale."""

__version__ = "0.1.0"

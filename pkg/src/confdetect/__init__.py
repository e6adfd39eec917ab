"""confdetect - adversarial example detection from pixel and confidence artifacts."""

__version__ = "0.1.0"

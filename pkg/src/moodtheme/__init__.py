"""Music mood/theme tagging: MobileNetV2 backbone with a self-attention block."""
__version__ = "0.1.0"

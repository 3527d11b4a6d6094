"""Integer-only inference, post-training quantization and edge profiling for a
MobileNetV3-derived gaze regression network."""

__version__ = "0.1.0"

"""densecotrain: co-training object-detection harness for dense scenes."""

__version__ = "0.1.0"

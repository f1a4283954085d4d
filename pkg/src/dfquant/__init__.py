"""Data-free quantization with class-wise feature-distribution alignment."""
__version__ = "0.1.0"

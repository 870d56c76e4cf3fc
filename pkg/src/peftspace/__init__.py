"""Parameter-efficient fine-tuning design spaces on a miniature transformer."""
__version__ = "0.1.0"

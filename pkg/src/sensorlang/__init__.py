"""Zero-shot activity recognition by aligning sensor encoders with class-text embeddings."""

__version__ = "0.1.0"

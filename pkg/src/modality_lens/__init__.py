"""Map point clouds into a frozen ViT's input space through a trainable Perceiver lens."""

__version__ = "0.1.0"

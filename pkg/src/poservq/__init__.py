"""Motion tokenizer built from interpretable pose codes plus residual vector quantization."""

__version__ = "0.1.0"

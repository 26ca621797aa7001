"""clspool: a desk-scale transformer-encoder lab for [CLS] aggregation heads."""

__version__ = "0.1.0"

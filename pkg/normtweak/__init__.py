"""
Norm-Tweaking post-training quantization toolkit for toy-scale decoder-only transformers
"""

__version__ = "0.3.0"
ARTIFACT_VERSION = f"normtweak-{__version__}"

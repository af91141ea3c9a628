"""Desk-scale thermal-infrared cloud retrieval laboratory.

Synthetic scenes, a two-stage transfer-trained ResUnet, a pixel random
forest baseline, and the evaluation / climatology tooling around them.
"""

__version__ = "0.1.0"

"""Lite-Mind: DFT backbone for fMRI-to-image retrieval"""

__version__ = "0.1.0"

"""Desk-scale recurrent optical flow with graph reasoning."""

__version__ = "0.1.0"

"""Gated multi-branch network with factor-signature fusion.

Subpackages are imported explicitly (``mlfn.model``, ``mlfn.train`` etc.);
this module stays import-light so the CLI can configure threading before
numpy is loaded.
"""

__version__ = "0.1.0"

"""Robust text classification at desk scale: an orthogonally-constrained
transformer encoder trained with a margin loss, plus the attack harness
and diagnostics used to measure the robustness gain."""

__version__ = "0.1.0"

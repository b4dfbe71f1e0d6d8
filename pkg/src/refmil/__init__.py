"""Weakly supervised referring-expression comprehension.

An LSTM scores a sentence against (region, context) pairs; training uses
bag-level margins so only expression-to-region links are needed, never
pair-level labels. See the README for the CLI entry points.
"""

__version__ = "0.1.0"

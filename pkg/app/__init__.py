"""
ProtoFair Harness

Fairness-aware contrastive regularizer with momentum prototypes and a cross-batch
feature queue, trained on a synthetic biased benchmark.
"""

__version__ = "0.1.0"

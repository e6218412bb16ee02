"""Risk-targeted portfolio research engine.

Trains a recurrent cross-asset scorer over engineered price features and
post-processes any simplex portfolio to a caller-chosen risk level, with a
deterministic backtesting harness around both halves.
"""

__version__ = "0.1.0"

"""In-context world models: tabular recognition/learning estimators, their
error bounds, randomized cart-poles, and a gated slot-attention world model."""

__version__ = "0.1.0"

"""Token-cascade vision transformers with early exits, on a numpy autodiff core."""

__version__ = "0.1.0"

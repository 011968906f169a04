"""Label-free radio-map construction from unlabeled beam-power measurements."""

__version__ = "0.1.0"

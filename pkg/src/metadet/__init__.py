"""Few-shot detection of evolving adversarial attacks via meta-learning."""

__version__ = "0.1.0"

"""White-box adversarial robustness evaluation for small image classifiers."""

__version__ = "0.1.0"

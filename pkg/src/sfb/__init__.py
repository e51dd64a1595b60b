"""Stable Feature Boosting: stable predictors, complementary unstable features and
bias-corrected test-domain adaptation without labels."""

__version__ = "0.1.0"

"""Counterfactual inference for debiasing multiple-choice QA models, with a synthetic shortcut benchmark."""

__version__ = "0.1.0"

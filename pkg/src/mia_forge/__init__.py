"""Membership-inference privacy auditing for small federated classifiers.

The package trains scaled-down target models (plain and DP-SGD), simulates
FedAvg, runs a stacking membership-inference attack together with three
baselines, and evaluates everything with TPR-at-low-FPR metrics.
"""

__version__ = "0.1.0"

"""Federated learning simulator with critical-parameter (FedCPA) and baseline robust aggregation."""

__version__ = "0.1.0"

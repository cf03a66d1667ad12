"""Client-level differentially private federated learning for regional case forecasting."""

__version__ = "0.1.0"

"""Two-party vertical federated multi-view training (FedMVT) simulator."""

__version__ = "0.1.0"

"""Multi-server federated learning simulator."""

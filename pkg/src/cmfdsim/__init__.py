"""Consensus-based decentralized federated learning in function space.

Simulates the function-space consensus subgradient method, its neural
implementation by distillation over a shared unlabeled set, and the
parameter-averaging baseline on multi-hop graphs, and evaluates the
convergence envelopes that accompany the method.
"""

__version__ = "0.1.0"
CONFIG_SCHEMA_VERSION = "1"

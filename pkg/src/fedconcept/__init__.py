"""Federated training of concept-based models under partial, evolving supervision.

The package simulates a server/client federation in-process: synthetic tabular
datasets are sampled from Bayesian networks, split into client shards with
heterogeneous concept annotations, and a shared concept-based model (bipartite
or graph-based) is trained with structure aggregation, dynamic architecture
adaptation and module-wise parameter averaging.
"""

__version__ = "0.1.0"

"""Two-stage learned economic dispatch for DC-OPF: a graph network proposes, a flow-matching refiner corrects."""

__version__ = "0.1.0"

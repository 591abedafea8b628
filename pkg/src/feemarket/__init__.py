"""Fee-market laboratory: priority-queue simulation, VCG pricing and a
two-stage estimator of the fee / delay-gradient relationship."""

__version__ = "0.1.0"

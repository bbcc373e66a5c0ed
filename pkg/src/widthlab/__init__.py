"""Width-scaling laboratory for parameterizations of deep perceptrons."""

__version__ = "0.1.0"

"""Dual-path dynamic pruning: DCIL and DPF trainers on a small numpy autograd core."""

__version__ = "0.1.0"

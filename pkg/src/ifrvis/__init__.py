"""Video instance segmentation with inter-frame recurrent query attention, on a small NumPy autograd core."""

__version__ = "0.1.0"

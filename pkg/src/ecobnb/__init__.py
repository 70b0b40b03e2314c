"""Branch-and-bound MPC for driving-mode eco-driving of heavy-duty trucks."""

__version__ = "0.1.0"

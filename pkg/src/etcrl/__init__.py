"""Deep reinforcement learning of event-triggered controllers."""
__version__ = "0.1.0"

"""Style-conditioned offline RL on the Circle2d benchmark."""

__version__ = "0.1.0"

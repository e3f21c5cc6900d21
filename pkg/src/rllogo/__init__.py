"""Logo localization and recognition with a deep Q-network agent.

The agent starts from the whole image, moves and rescales a bounding box with
nine discrete actions, and classifies the logo from the current crop. Training
needs only image-level labels: the movement reward is the change in the
softmax confidence of the true class.
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]

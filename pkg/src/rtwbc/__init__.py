"""Human-to-robot motion transfer toolkit.

Retargets streamed human segment poses onto a mobile manipulator: pose
correspondence with per-limb length scaling, a prioritized whole-body
velocity controller, differential-drive base imitation, and a variable
admittance layer with an online stability monitor, wrapped in a
deterministic simulator and a small CLI.
"""

from .geom import Rotation, Transform, null_space_projector, pseudo_inverse

__version__ = "0.1.0"

__all__ = [
    "Rotation",
    "Transform",
    "pseudo_inverse",
    "null_space_projector",
    "__version__",
]

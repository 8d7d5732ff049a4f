"""Point-cloud odometry: differentiable hierarchical pose regression plus
KITTI-format data tooling and the standard trajectory evaluator."""

__version__ = "0.1.0"

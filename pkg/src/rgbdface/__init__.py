"""Model-based RGBD face tracking with blendshapes, cascaded shape
regression, joint 2D+3D refinement and face-prior depth recovery."""

__version__ = "0.1.0"

"""skelfuse: skeleton-multiview fusion for 3D mesh instance segmentation."""

__version__ = "0.1.0"

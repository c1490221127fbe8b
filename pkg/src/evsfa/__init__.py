"""Event-camera action recognition with unsupervised spatiotemporal filters.

Two stages: spatiotemporal filters learned from voxelized spike events by
minimizing response change under an event-removal perturbation, and a
small convolutional classifier over the pooled filter responses.
"""

__version__ = "0.1.0"

"""Multi-view point-cloud / action / text contrastive pretraining and a
diffusion action-chunk policy, with a procedural tabletop data generator."""

__version__ = "0.1.0"

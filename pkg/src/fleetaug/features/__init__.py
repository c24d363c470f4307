"""Voxel grids, BEV maps and the toy backbone."""

from fleetaug.features.backbone import (
    Backbone,
    BackboneSpec,
    SetFeature,
    extract_grid_feature,
    extract_set_feature,
    init_backbone,
    receptive_field,
)
from fleetaug.features.voxelgrid import (
    BevFeature,
    GridSpec,
    SparseVoxelGrid,
    bev_compress,
    nonzero_cell_count,
    voxelize,
)

__all__ = [
    "Backbone",
    "BackboneSpec",
    "BevFeature",
    "GridSpec",
    "SetFeature",
    "SparseVoxelGrid",
    "bev_compress",
    "extract_grid_feature",
    "extract_set_feature",
    "init_backbone",
    "nonzero_cell_count",
    "receptive_field",
    "voxelize",
]

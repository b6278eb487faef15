from .kway import Partition, PartitionError, cut_weight, edge_cut_rate, part_capacity, partition_kway
from .batches import (
    CpsConfig,
    MiniBatch,
    OverlapConfig,
    expand_overlap,
    metis_cps,
    seed_colocation_rate,
    vps,
)

__all__ = [
    "CpsConfig",
    "MiniBatch",
    "OverlapConfig",
    "Partition",
    "PartitionError",
    "cut_weight",
    "edge_cut_rate",
    "expand_overlap",
    "metis_cps",
    "part_capacity",
    "partition_kway",
    "seed_colocation_rate",
    "vps",
]

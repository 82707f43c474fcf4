"""H2-matrix approximation of dense kernel matrices from their entries."""

from .baselines import ProxyGrid, acageo_build, chebyshev_proxies
from .densecore import (
    CountingOracle,
    DenseOracle,
    MatrixOracle,
    MaxvolResult,
    RankDeficiencyError,
    maxvol,
    pivoted_lu_rows,
    skeleton_reconstruct,
    truncated_svd,
)
from .geometry import ClusterNode, ClusterTree, PointSet, build_cluster_tree, node_diameter, node_distance
from .h2 import BuildStats, H2Matrix, assemble_h2, far_field_error, load_h2, memory_bytes, save_h2
from .kernels import (
    ParticleSystem,
    SingularEntryError,
    SurfaceMesh,
    coulomb_oracle,
    double_layer_oracle,
    load_mesh,
    random_particles,
    separable_oracle,
    sphere_level_for,
    sphere_mesh,
)
from .mcbh import (
    Basis,
    NestedBases,
    RepresentorSet,
    downward_pass,
    mcbh_build,
    mcbh_iterate,
    shift_to_predecessors,
    upward_pass,
)
from .partition import BlockPartition, build_partition, is_admissible, predecessors

__version__ = "0.1.0"

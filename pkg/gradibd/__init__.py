"""Graph diagnosis models over visit-bucketized ICD code trajectories."""

__version__ = "1.0.0"

# On-disk format versions, bumped independently of the package version.
CHECKPOINT_FORMAT_VERSION = 2
GRAPH_FORMAT_VERSION = 1
COHORT_FORMAT_VERSION = 1

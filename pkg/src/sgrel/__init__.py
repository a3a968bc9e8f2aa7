"""Scene-graph relation prediction toolkit.

Builds, trains, refines, and evaluates a minimal relation-prediction pipeline
over precomputed region features and label embeddings: contrastive text-image
alignment, embedding-distance predicate refinement, recall-guided resampling,
information-content loss weighting, and a full recall metric suite, plus a
deterministic synthetic corpus generator for desk-scale experiments.
"""

__version__ = "0.1.0"

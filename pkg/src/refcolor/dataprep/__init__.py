"""Training data: shots, line art, distance fields, windows and synthetic animation."""

from .distance import distance_field, squared_distance_transform
from .frames import Frame, ReferenceSet, Sequence, edges_from_color, sample_window
from .shots import ShotConfig, histogram_feature, shot_boundaries, split_ranges, split_shots
from .synth import synth_dataset, synth_sequence

__all__ = [
    "Frame",
    "ReferenceSet",
    "Sequence",
    "ShotConfig",
    "distance_field",
    "edges_from_color",
    "histogram_feature",
    "sample_window",
    "shot_boundaries",
    "split_ranges",
    "split_shots",
    "squared_distance_transform",
    "synth_dataset",
    "synth_sequence",
]

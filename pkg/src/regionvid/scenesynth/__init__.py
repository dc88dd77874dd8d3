"""Procedural sprite world standing in for real reference and training data."""
from .render import (
    ACCENT_EDGE, BACKGROUND_STYLE, PALETTE, POSE, SHAPE_AREA, ActionSpec, PlacedSubject, SceneError, SceneSpec,
    SubjectSpec, WorldConfig, reference_rgba, render_background, render_frame, render_video, sprite_extent, sprite_masks,
)
from .corpus import CorpusConfig, CorpusItem, gen_corpus, render_corpus

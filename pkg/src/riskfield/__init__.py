"""Occlusion-aware driving-risk field on a bird's-eye-view grid.

The field is evolved by an explicit advection-diffusion-reaction solver whose
decay is coupled to a line-of-sight shadow mask cast by heavy vehicles.
"""
from .grid import GridSpec, ScalarField, VectorField, make_field, world_to_cell, integrate
from .ingest import AgentState, Frame, Recording, load_recording, detect_lane_changes
from .shadow import (
    OcclusionWindow, SelectionZone, ShadowMask, compute_shadow_mask, extract_occlusion_windows,
)
from .sources import MergeTopology, SourceParams, total_source, velocity_field
from .pde import (
    FULL, PLUS_ADVECTION, PLUS_DIFFUSION, SOURCE_ONLY, STATIC, AblationConfig, FieldEvolver,
    PdeParams, evolve_window, stable_dt, step,
)
from .metrics import MetricsReport, RegionSpec

__version__ = "0.1.0"

from .generator import GenerationError, GeneratorConfig, TOPOLOGIES, generate_scenario
from .types import (
    AgentState,
    AgentTrack,
    Category,
    Centerline,
    MapPolyline,
    PolylineKind,
    RegionPolygon,
    Scenario,
    normalize_frame,
)
from .io import (
    ScenarioFormatError,
    iter_corpus,
    load_scenario,
    read_corpus,
    serialize_scenario,
    write_corpus,
)
from .targets import compute_displacement_targets

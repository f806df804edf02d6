"""Scene types, procedural generator, reference rasterizer and file formats."""

from .generator import VOCAB, GeneratorConfig, InfeasibleSpecError, generate_scene
from .io import SceneFormatError, load_scene, save_scene
from .raster import rasterize_reference
from .types import (
    MAP_CATEGORIES,
    NUM_CLASSES,
    TAXONOMY,
    BoundingBox3D,
    Camera,
    ClassTaxonomy,
    MapPolyline,
    OccupancyGrid,
    Scene,
    resample_polyline,
)

"""Gradient-domain compositing and harmonization-dataset synthesis."""

from .errors import RPBError
from .imaging import (
    Image,
    Mask,
    Region,
    bbox_of_mask,
    composite,
    crop,
    foreground_ratio,
    load_image,
    load_mask,
    paste,
    save_image,
    save_mask,
)
from .poisson import GuidanceField, SolverConfig, build_guidance_field, seamless_clone, solve_region
from .synthesis import (
    BlendParams,
    ReferenceCorpus,
    SyntheticResult,
    mix_foregrounds,
    random_poisson_blend,
    sample_alpha,
    sample_placement,
)

__version__ = "0.1.0"

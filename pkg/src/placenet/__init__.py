"""placenet: place-type-aware classification of multi-category 2-D point sets.

A small, framework-free library built around four ideas:

* a message-passing layer over a KNN graph whose weight matrices are *maps*
  keyed by place-type rather than scalars, with category-pair association
  weights and a fully analytic backward pass;
* training strategies that trade data hunger against spatial variability:
  one-size-fits-all (OSFA), per-place-type ensembles, inverse-distance
  weighted learning rates (WDLR), and spatial domain adaptation (SDA) with
  frozen shared layers;
* a seeded synthetic benchmark generator that plants conflicting
  class-discriminative arrangements across place-types;
* permutation importance over (center category, neighbor multiset) feature
  blocks for spatial-relationship explanations.

See the ``placenet`` CLI (`placenet --help`) for the end-to-end pipeline.
"""

__version__ = "0.1.0"

from placenet.errors import DataValidationError, NumericalError, PlacenetError

__all__ = [
    "__version__",
    "PlacenetError",
    "DataValidationError",
    "NumericalError",
]

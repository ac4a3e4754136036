"""Zero-shot remote-sensing instance segmentation head toolkit.

Operates on precomputed embeddings and instance masks: channel-refined text
classifiers, knowledge-maintained channel partitioning, cache-bank prior
injection, geometric score ensembling, and the seen/unseen evaluation
protocols, plus a deterministic synthetic fixture generator and a CLI.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    cachebank,
    dec,
    ensemble,
    errors,
    evaluation,
    kma,
    pipeline,
    protocol,
    report,
    synth,
    tensorcore,
)

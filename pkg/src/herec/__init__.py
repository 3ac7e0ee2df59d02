"""Rating prediction with heterogeneous information network embeddings.

Pipeline: typed graph (:mod:`herec.hin`) -> meta-path walks (:mod:`herec.walker`)
-> skip-gram embeddings (:mod:`herec.embedder`) -> fusion (:mod:`herec.fusion`)
-> extended matrix factorization (:mod:`herec.recommender`), with the
experiment harness in :mod:`herec.evaluation`.
"""

__version__ = "0.1.0"

from .embedder import EmbedConfig, EmbeddingSet, embed_all, load_embeddings, save_embeddings  # noqa: E402
from .fusion import FusionKind, FusionParams, fuse, fusion_gradients  # noqa: E402
from .hin import (DataError, HinGraph, MetaPath, NetworkSchema, RatingDataset, RatingRecord,  # noqa: E402
                  load_graph, load_meta_paths, load_ratings, parse_meta_path)
from .recommender import HerecModel, HyperParams, MFModel, load_model, save_model  # noqa: E402
from .walker import WalkConfig, generate_corpus, generate_walk  # noqa: E402

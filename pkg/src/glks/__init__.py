"""Global-to-local knowledge selection for background-based conversation."""

import os

# BLAS reads these once, when numpy is first imported. GLKS_THREADS caps the
# worker count; one thread keeps runs bit-for-bit reproducible.
_threads = os.environ.get("GLKS_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

from .data import Episode, Vocabulary, build_vocab, make_batch, make_batches, synth_corpus, tokenize  # noqa: E402
from .model import GLKS, ModelConfig  # noqa: E402
from .training import TrainConfig, load_checkpoint, save_checkpoint, train  # noqa: E402

__all__ = [
    "Episode", "Vocabulary", "build_vocab", "make_batch", "make_batches", "synth_corpus", "tokenize",
    "GLKS", "ModelConfig", "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
__version__ = "0.1.0"

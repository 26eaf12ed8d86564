"""Character-level and subword NMT on a small numpy autodiff engine.

Modules: ``tensor`` (autodiff), ``tokenize`` (vocabularies, BPE, batching),
``model`` (encoders and decoder), ``train``, ``decode``, ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"

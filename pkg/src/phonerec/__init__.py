"""Phone recognition toolkit: synthetic read-speech corpus, CTC and
attention acoustic models on a from-scratch autodiff engine, transfer
learning, beam-search decoding and reading-miscue evaluation."""

__version__ = "0.1.0"

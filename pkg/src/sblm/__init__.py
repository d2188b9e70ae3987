"""Speech language models over syllable-like units.

Submodules: ``dsp`` (log-mel analysis and Griffin-Lim), ``corpus`` (alignments,
syllabification, unit cache), ``artic`` (articulatory feature vectors),
``ndl`` (LSTM/linear layers with hand-written gradients, Adam, checkpoints),
``speechlm``, ``textlm``, ``evalprobe`` (MCD, vowel probes, metric report)
and ``cli``.
"""
__version__ = "0.1.0"

__all__ = ["artic", "cli", "corpus", "dsp", "evalprobe", "ndl", "pipeline",
           "speechlm", "synth", "textlm", "kernels", "__version__"]

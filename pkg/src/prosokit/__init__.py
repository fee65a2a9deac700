"""Prosodic feature pipeline for scripted smartphone voice prompts.

Submodules: ``audio`` (WAV decoding, framing), ``features`` (per-recording
feature vectors), ``qc`` (exclusion rules), ``session`` (prompt protocol and
cohort simulator), ``device`` / ``server`` / ``wire`` (delete-after-commit
sync), ``stats`` / ``forest`` / ``cv`` (evaluation), ``cli``.
"""

__version__ = "0.1.0"

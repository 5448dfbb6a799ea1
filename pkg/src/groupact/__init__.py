"""Group activity recognition with a plug-in text branch.

A frozen image branch (relation module + classifiers) is trained first on
synthetic actor-feature clips; a text branch (feature-to-text adapter,
low-rank adapters on the shared relation module, and its own activity
classifier) is then trained against a deterministic text-embedding teacher
and fused with the image branch at the score level.
"""

__version__ = "0.1.0"

"""Class-aware adversarial transferability lab.

Submodules: ``nn`` (numpy network engine), ``attacks``, ``metrics``,
``geometry``, ``nonrobust``, ``theory``, ``data``, ``config``, ``harness``
and ``cli``. The package root stays import-light so the CLI can set thread
counts before numpy loads.
"""

__version__ = "0.1.0"

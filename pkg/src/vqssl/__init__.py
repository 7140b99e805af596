"""Multi-scale vector-quantized self-supervised pretraining on numpy.

Modules: ``datagen`` (phantom corpus, augmentation), ``encoder``, ``vq``,
``serf`` (target fusion), ``objective``, ``momentum``, ``optim``, ``trainer``,
``checkpoint``, ``evalsuite`` and ``cli``.
"""

__version__ = "0.1.0"

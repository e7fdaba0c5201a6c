"""Polynomial convolutional networks for thermal fault diagnosis.

The package is organized bottom-up: `ops` holds the raw array kernels,
`model` assembles them into the three-block classifier, `training` runs
the optimization loop, `data` and `synth` handle images and corpora,
`metrics` scores predictions, and `cli` ties everything to the
`selfonn-kit` command.
"""

__version__ = "0.1.0"

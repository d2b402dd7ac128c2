"""A small convolutional network toolkit on numpy: tensors, reverse-mode
autodiff, layers, architecture specs, training, SVMs and transfer learning."""

__version__ = "0.1.0"

"""Max-margin deep generative models: variational autoencoders whose recognition
features are trained jointly with a multiclass max-margin classifier, plus a
class-conditional semi-supervised variant."""

__version__ = "0.1.0"

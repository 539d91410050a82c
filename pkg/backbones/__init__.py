# Backbone interfaces and deterministic toy implementations.
# Importing the toy modules registers them.

from backbones import autoencoders, denoisers, edges, faces, flow, text  # noqa: F401

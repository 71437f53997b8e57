"""RPC camera geometry, multiplane-image rendering and explicit scene fitting."""

__version__ = "0.1.0"

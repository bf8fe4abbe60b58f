"""taoslite: a small, modular CI engine for frequently updated device-software repositories."""

__version__ = "0.1.0"

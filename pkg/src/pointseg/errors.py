"""Exception types shared across the package."""

from __future__ import annotations


class PointSegError(Exception):
    """Base class for all package errors."""


class PointOutOfBounds(PointSegError):
    """A point prompt lies outside its image."""


class DegenerateBox(PointSegError):
    """Clipping emptied a box."""


class DimensionMismatch(PointSegError):
    """Two rasters (or a raster and a box) disagree on dimensions."""


class FormatError(PointSegError):
    """Malformed file content. `kind` narrows the failure."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class MissingFile(PointSegError):
    """A file referenced by a manifest does not exist."""


class EmptyMask(PointSegError):
    """An operation required a non-empty mask."""


class EmptyPrototype(PointSegError):
    """The learned selector was used before any prototype was populated."""


class NonFiniteUpdate(PointSegError):
    """An optimizer step produced NaN or Inf parameters."""


class BackendError(PointSegError):
    """A segmentation backend failed. `category` is one of
    connect, timeout, protocol, server."""

    def __init__(self, category: str, message: str):
        super().__init__(f"{category}: {message}")
        self.category = category


class ConfigError(PointSegError):
    """Invalid run configuration (bad value or unknown key)."""

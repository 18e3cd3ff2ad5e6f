"""Typed exception hierarchy shared across the package."""


class ProtofewError(Exception):
    """Base class for every error raised by this package."""


# --- embedding containers and dataset manifests ---

class ContainerError(ProtofewError):
    """Malformed binary embedding container."""


class BadMagic(ContainerError):
    pass


class Truncated(ContainerError):
    pass


class NonFinite(ContainerError):
    pass


class ManifestError(ProtofewError):
    """Invalid or inconsistent dataset manifest."""


class MissingFile(ManifestError):
    pass


class DimMismatch(ManifestError):
    pass


class LabelOutOfRange(ManifestError):
    pass


class EmptyClass(ManifestError):
    pass


class ZeroNormRow(ProtofewError):
    pass


class NotEnoughShots(ProtofewError):
    pass


# --- autodiff ---

class ShapeMismatch(ProtofewError):
    pass


class NotScalarLoss(ProtofewError):
    pass


class DetachedTensor(ProtofewError):
    pass


class NonFiniteValue(ProtofewError):
    pass


# --- model construction ---

class DimNotSquare(ProtofewError):
    pass


# --- training and checkpoints ---

class NonFiniteLoss(ProtofewError):
    pass


class VersionMismatch(ProtofewError):
    pass


class CorruptCheckpoint(ProtofewError):
    pass


# --- evaluation ---

class NoLabels(ProtofewError):
    pass

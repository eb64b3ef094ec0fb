"""Typed failures raised across the pipeline."""


class FrustumDecoError(Exception):
    pass


class BehindCamera(FrustumDecoError):
    pass


class MalformedFile(FrustumDecoError):
    pass


class MissingKey(FrustumDecoError):
    pass


class MalformedMatrix(FrustumDecoError):
    pass


class MalformedLine(FrustumDecoError):
    pass


class InvalidClass(FrustumDecoError):
    pass


class EmptyFrustum(FrustumDecoError):
    pass


class ShapeMismatch(FrustumDecoError):
    pass


class MissingMask(FrustumDecoError):
    pass


class DivergedLoss(FrustumDecoError):
    def __init__(self, message, last_finite_epoch=None):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch

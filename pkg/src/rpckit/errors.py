"""Exception hierarchy shared by every rpckit module."""


class RpcKitError(Exception):
    """Base class for all library errors."""


class RpcFormatError(RpcKitError):
    pass


class MissingKey(RpcFormatError):
    def __init__(self, key):
        super().__init__(f"missing key {key!r}")
        self.key = key


class MalformedNumber(RpcFormatError):
    def __init__(self, key, text, lineno=None):
        where = f" (line {lineno})" if lineno is not None else ""
        super().__init__(f"malformed number for {key!r}{where}: {text!r}")
        self.key = key
        self.text = text
        self.lineno = lineno


class NonPositiveScale(RpcFormatError):
    def __init__(self, key, value):
        super().__init__(f"scale {key!r} must be > 0, got {value!r}")
        self.key = key
        self.value = value


class DenominatorNearZero(RpcKitError):
    def __init__(self, index, value):
        super().__init__(f"rational denominator near zero at index {index}: {value!r}")
        self.index = index
        self.value = value


class NoInverseModel(RpcKitError):
    def __init__(self, msg="camera has no inverse (localization) coefficients"):
        super().__init__(msg)


class NoConvergence(RpcKitError):
    def __init__(self, index, residual):
        super().__init__(f"localization did not converge at index {index}: residual {residual:.3e} px")
        self.index = index
        self.residual = residual


class SingularJacobian(RpcKitError):
    def __init__(self, index):
        super().__init__(f"singular projection jacobian at index {index}")
        self.index = index


class RankDeficientSystem(RpcKitError):
    def __init__(self, rank, columns):
        super().__init__(f"least-squares design matrix has rank {rank} < {columns}")
        self.rank = rank
        self.columns = columns


class ResidualAboveTolerance(RpcKitError):
    def __init__(self, max_residual, tol):
        super().__init__(f"fit residual {max_residual:.3e} exceeds tolerance {tol:.3e}")
        self.max_residual = max_residual
        self.tol = tol


class DegenerateRange(RpcKitError):
    pass


class DimMismatch(RpcKitError):
    pass


class EmptyMask(RpcKitError):
    pass


class ImageTooSmall(RpcKitError):
    pass


class NonPositiveHeight(RpcKitError):
    def __init__(self, index, value):
        super().__init__(f"non-positive height at point {index}: {value!r}")
        self.index = index
        self.value = value


class OutOfBoundsPoint(RpcKitError):
    def __init__(self, index, row, col):
        super().__init__(f"sparse point {index} at (row={row}, col={col}) is outside the raster")
        self.index = index


class MissingTerm(RpcKitError):
    def __init__(self, name):
        super().__init__(f"loss term {name!r} required but not provided")
        self.name = name


class NonFiniteLoss(RpcKitError):
    def __init__(self, term, value, iteration=None):
        at = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"loss term {term!r} is not finite{at}: {value!r}")
        self.term = term
        self.value = value
        self.iteration = iteration


class BadConfig(RpcKitError):
    pass


class ShapeMismatch(RpcKitError):
    pass


class BadDims(RpcKitError):
    pass


class FootprintOutOfTerrain(RpcKitError):
    pass


class UnsupportedFormat(RpcKitError):
    pass


class CorruptFile(RpcKitError):
    pass

"""Exception hierarchy shared by every protoalign module."""


class ProtoAlignError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ProtoAlignError, ValueError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, primitive, *shapes, detail=""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{primitive}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TrainingDivergenceError(ProtoAlignError, FloatingPointError):
    """A tracked value became NaN or infinite."""

    def __init__(self, primitive, checkpoint=None):
        self.primitive = primitive
        self.checkpoint = checkpoint
        msg = f"non-finite value produced by {primitive}"
        if checkpoint is not None:
            msg += f"; last good checkpoint at {checkpoint}"
        super().__init__(msg)


class ConfigError(ProtoAlignError, ValueError):
    """Invalid configuration value; ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class MissingGradError(ProtoAlignError, RuntimeError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"parameter {name!r} has no gradient")


class GradCheckError(ProtoAlignError, ArithmeticError):
    """Finite-difference estimate was not finite at a leaf coordinate."""

    def __init__(self, leaf, index):
        self.leaf = leaf
        self.index = index
        super().__init__(f"non-finite numeric gradient at leaf {leaf} index {index}")


class FormatError(ProtoAlignError, ValueError):
    """Malformed NTSR file or checkpoint manifest."""


class CheckpointMismatchError(ProtoAlignError, ValueError):
    """Checkpoint contents do not match the requested architecture."""


class GenerationError(ProtoAlignError, ValueError):
    """Scene geometry ranges cannot be realised."""


class LabelLeakageError(AssertionError):
    """Target-domain labels were requested during unsupervised adaptation."""

"""Exception types raised across the package."""


class CaarmaError(Exception):
    pass


class ValidationError(CaarmaError, ValueError):
    """A record violates one of its invariants. ``field`` names the culprit."""

    def __init__(self, field, message=None):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class ParseError(CaarmaError, ValueError):
    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class TooShortError(CaarmaError, ValueError):
    pass


class DimensionError(CaarmaError, ValueError):
    pass


class DegenerateError(CaarmaError, ValueError):
    pass


class SingleClassError(CaarmaError, ValueError):
    pass


class MissingLayerError(CaarmaError, KeyError):
    def __init__(self, layer):
        self.layer = layer
        super().__init__(f"backbone layer {layer} not present")

    def __str__(self):
        return self.args[0]


class DegenerateTrialsError(CaarmaError, ValueError):
    pass


class MissingUtteranceError(CaarmaError, KeyError):
    def __init__(self, utt_id):
        self.utt_id = utt_id
        super().__init__(f"utterance {utt_id!r} has no embedding")

    def __str__(self):
        return self.args[0]


class VersionError(CaarmaError):
    pass

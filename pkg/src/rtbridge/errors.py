"""Exception hierarchy shared by every layer of the bridge."""


class BridgeError(Exception):
    """Base class for recoverable errors raised by the bridge."""


class FatalInvariantError(BridgeError):
    """A broken runtime invariant (double free, unmatched unlock, ...).

    The CLI maps this to exit code 2.
    """


class AllocationError(BridgeError):
    pass


class ConversionError(BridgeError):
    pass


class BridgeAttributeError(BridgeError):
    """Attribute access failed on the native side of a peer."""


class BridgeTypeError(BridgeError):
    pass


class CallError(BridgeError):
    pass


class FormatSyntaxError(BridgeError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class MarshalError(BridgeError):
    pass


class ArityError(MarshalError):
    def __init__(self, expected, got):
        super().__init__(f"expected {expected} values, got {got}")
        self.expected = expected
        self.got = got


class KindError(MarshalError):
    def __init__(self, unit, expected, got):
        super().__init__(f"unit {unit}: expected {expected}, got {got}")
        self.unit = unit
        self.expected = expected
        self.got = got


class ExtensionError(BridgeError):
    pass


class ScenarioError(BridgeError):
    def __init__(self, message, lineno=None, command=None):
        where = f"line {lineno}: " if lineno is not None else ""
        text = f"{where}{message}"
        if command is not None:
            text += f" [{command}]"
        super().__init__(text)
        self.lineno = lineno
        self.command = command

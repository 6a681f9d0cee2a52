"""A managed runtime bridged to a simulated native object heap."""

from .bridge import Bridge, NativeListView, Strategy
from .errors import (
    ArityError,
    BridgeError,
    ConversionError,
    FatalInvariantError,
    FormatSyntaxError,
    KindError,
    MarshalError,
    ScenarioError,
)
from .extload import DEMO_DESCRIPTOR, ExtensionRegistry, parse_descriptors
from .gcbridge import GcBridge
from .lock import BoundaryLock
from .managed import ManagedRuntime, MKind
from .native import Kind, NativeRef, NativeRuntime
from .runtime import Runtime
from .scenario import ScenarioConfig, emit_stats, run_scenario
from .valuefmt import build_value, parse_args, parse_format

__version__ = "0.1.0"

__all__ = [
    "ArityError", "BoundaryLock", "Bridge", "BridgeError", "ConversionError", "DEMO_DESCRIPTOR",
    "ExtensionRegistry", "FatalInvariantError", "FormatSyntaxError", "GcBridge", "Kind", "KindError",
    "MKind", "ManagedRuntime", "MarshalError", "NativeListView", "NativeRef", "NativeRuntime",
    "Runtime", "ScenarioConfig", "ScenarioError", "Strategy", "build_value", "emit_stats",
    "parse_args", "parse_descriptors", "parse_format", "run_scenario",
]

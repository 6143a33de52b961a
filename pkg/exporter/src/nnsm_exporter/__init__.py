"""ONNX-subset to NNSM converter with cross-runtime verification."""

from .convert import ExportError, ExportManifest, convert, export, write_nnsm
from .onnx_wire import OnnxGraph, OnnxParseError, load_onnx, parse_model
from .runtime import OnnxEvalError, evaluate

__version__ = "0.1.0"

"""Conditional transformation models: estimation, prediction, trees and forests."""

__version__ = "0.1.0"

"""dynroute: content-adaptive dynamic-routing detector at desk scale."""

__version__ = "0.1.0"

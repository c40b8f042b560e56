"""Exception types shared across the simulator."""


class RayWaveError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(RayWaveError, ValueError):
    """Invalid prescription, grid or run configuration."""


class MaterialError(RayWaveError, ValueError):
    """A material model produced an unusable refractive index."""


class SimulationError(RayWaveError, RuntimeError):
    """The forward model could not produce a result (e.g. every ray died)."""


class ResourceError(RayWaveError, MemoryError):
    """A request exceeds the configured memory budget."""

    def __init__(self, message, required_bytes=None):
        super().__init__(message)
        self.required_bytes = required_bytes


class NyquistError(RayWaveError, ValueError):
    """The sampled angular spectrum transfer function would alias the field."""

    def __init__(self, message, required_pitch_um=None):
        super().__init__(message)
        self.required_pitch_um = required_pitch_um


class ModelInapplicableError(RayWaveError, ValueError):
    """The grating-equation ray model cannot represent this phase map."""


class OptimizationError(RayWaveError, RuntimeError):
    """Optimization aborted (non-finite loss or gradient)."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}

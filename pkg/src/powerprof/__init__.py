"""Job-level power profiling, GAN embedding and open-set classification for HPC jobs."""

from powerprof.errors import ConfigError, DataError, NumericError, PowerprofError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericError", "PowerprofError", "__version__"]

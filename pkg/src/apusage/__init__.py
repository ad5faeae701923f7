"""Per-AP 802.11 usage modeling and anomaly detection from RADIUS accounting logs."""

__version__ = "0.1.0"

from . import detect, evaluate, features, gmm, hmm, ingest, simulate, workflow  # noqa: F401

"""Models and analysis tools for quantum communication over long submarine fibre links."""

from importlib.resources import files

from qlink.channel import ChannelParams, DetectorParams, StraySpectrum, transmittance
from qlink.coincidence import (
    CoincidenceCounter,
    DelayHistogram,
    PairSourceParams,
    accidental_rate,
    car,
    delay_histogram,
    simulate_pairs,
)
from qlink.decoy import (
    DecoyKeyRateModel,
    ProtocolParams,
    gain_and_qber,
    optimize_flux,
    secret_key_rate,
    simulate_gates,
    sweep_distance,
    yield_bounds,
)
from qlink.phase import PhaseExtractor, PhaseNoiseSpec, PhaseSpectrum, estimate_psd
from qlink.physics import PhotonFluxSpec, binary_entropy, power_for_flux
from qlink.polarization import PolarizationState, RetarderStack, align_gradient_descent, simulate_drift
from qlink.timetags import TimeTagStream

__version__ = "0.1.0"


def config_path(name: str):
    """Path of a shipped example config, e.g. ``config_path("fig5")``."""
    return files("qlink") / "configs" / (name if name.endswith(".ini") else name + ".ini")

"""Mamba U-Net speech separation.

Thin python surface over the C++ core: selective-scan recurrence, the
waveform separator, separation metrics and the dynamic-mixing data pipeline.
"""

from ._core import (
    ConfigurationError,
    DataFormatError,
    NumericalError,
    Separator,
    count_macs,
    count_params,
    default_config,
    dynamic_mix,
    lookahead_samples,
    selective_scan,
    si_sdr,
    speed_perturb,
    synth_source,
    upit_loss,
)

__version__ = "0.1.0"


def preset(name: str) -> dict:
    """Model configuration presets: "s", "m" or "tiny"."""
    cfg = default_config()
    if name in ("s", "S"):
        return cfg
    if name in ("m", "M"):
        cfg.update(base_dim=128, blocks_per_stage=6)
        return cfg
    if name == "tiny":
        cfg.update(n_stages=3, base_dim=16, blocks_per_stage=2)
        return cfg
    raise ValueError(f"unknown preset {name!r} (expected 's', 'm' or 'tiny')")


__all__ = [
    "ConfigurationError",
    "DataFormatError",
    "NumericalError",
    "Separator",
    "count_macs",
    "count_params",
    "default_config",
    "dynamic_mix",
    "lookahead_samples",
    "preset",
    "selective_scan",
    "si_sdr",
    "speed_perturb",
    "synth_source",
    "upit_loss",
]

"""Physical constants and duration parsing."""

import re

from .errors import ConfigurationError

#: Boltzmann constant in meV/K.
K_B_MEV = 0.0861733

PS_PER_S = 10**12

_DURATION_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(ps|ns|us|µs|ms|s)?\s*$")
_SCALE_PS = {"ps": 1, "ns": 10**3, "us": 10**6, "µs": 10**6, "ms": 10**9, "s": 10**12}


def parse_duration(text, default_unit="ps"):
    """Parse a duration such as ``"10ns"`` or ``"2.5 us"`` into integer picoseconds.

    A bare number is interpreted in ``default_unit``. Non-integral picosecond
    results are rejected rather than silently rounded.
    """
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        text = str(text)
    m = _DURATION_RE.match(str(text))
    if m is None:
        raise ConfigurationError(f"cannot parse duration {text!r} (expected e.g. '500ps', '10ns', '1us')")
    value, unit = m.group(1), m.group(2) or default_unit
    if unit not in _SCALE_PS:
        raise ConfigurationError(f"unknown duration unit {unit!r}")
    ps = float(value) * _SCALE_PS[unit]
    if abs(ps - round(ps)) > 1e-6 * max(1.0, abs(ps)):
        raise ConfigurationError(f"duration {text!r} is not a whole number of picoseconds")
    return int(round(ps))

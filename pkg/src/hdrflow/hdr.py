"""Per-pixel transforms between gamma-encoded LDR and linear radiance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

GAMMA = 2.2
MU = 5000.0
DELTA_LOW = 0.2
DELTA_HIGH = 0.8
BT601 = (0.299, 0.587, 0.114)


def _image(value) -> Tensor:
    t = value if isinstance(value, Tensor) else Tensor(value)
    if t.ndim != 3:
        raise ShapeError(f"expected a CHW image, got shape {t.shape}")
    return t


@dataclass
class LdrFrame:
    image: Tensor
    exposure: float
    frame_index: int = 0

    def __post_init__(self):
        self.image = _image(self.image)
        if not self.exposure > 0:
            raise ConfigError(f"exposure must be positive, got {self.exposure}")
        d = self.image.data
        if d.size and (d.min() < 0.0 or d.max() > 1.0):
            raise ConfigError("LDR pixel values must lie in [0, 1]")

    @property
    def shape(self):
        return self.image.shape


@dataclass
class RadianceFrame:
    image: Tensor
    white_point: float = 1.0

    def __post_init__(self):
        self.image = _image(self.image)
        if not self.white_point > 0:
            raise ConfigError(f"white point must be positive, got {self.white_point}")

    @property
    def shape(self):
        return self.image.shape


@dataclass
class LuminanceMask:
    mask: Tensor

    @property
    def coverage(self) -> float:
        """Fraction of pixels flagged well exposed."""
        return float(self.mask.data.mean())


@dataclass(frozen=True)
class ExposureSchedule:
    pattern: Tuple[float, ...]
    gamma: float = GAMMA

    def __post_init__(self):
        pattern = tuple(float(e) for e in self.pattern)
        object.__setattr__(self, "pattern", pattern)
        if len(pattern) not in (2, 3):
            raise ConfigError(f"schedule must cycle 2 or 3 exposures, got {len(pattern)}")
        if any(e <= 0 for e in pattern):
            raise ConfigError("exposures must be positive")
        if len(set(pattern)) != len(pattern):
            raise ConfigError(f"exposures must be pairwise distinct: {pattern}")

    @property
    def window_length(self) -> int:
        return 3 if len(self.pattern) == 2 else 5

    def exposure_at(self, index: int, phase: int = 0) -> float:
        return self.pattern[(index + phase) % len(self.pattern)]

    @classmethod
    def two_exposure(cls, gamma=GAMMA):
        return cls((1.0, 8.0), gamma)

    @classmethod
    def three_exposure(cls, gamma=GAMMA):
        return cls((1.0, 4.0, 16.0), gamma)


def _check_exposure(e):
    if not e > 0:
        raise ConfigError(f"exposure must be positive, got {e}")


def ldr_to_linear(frame: LdrFrame, gamma: float = GAMMA) -> RadianceFrame:
    """I = L^gamma / e."""
    _check_exposure(frame.exposure)
    return RadianceFrame(T.power(frame.image, gamma) * (1.0 / frame.exposure))


def linear_to_ldr(rad: RadianceFrame, target_exposure: float, gamma: float = GAMMA,
                  frame_index: int = 0) -> LdrFrame:
    _check_exposure(target_exposure)
    exposed = T.clip(rad.image * float(target_exposure), 0.0, None)
    ldr = T.clip(T.power(exposed, 1.0 / gamma), 0.0, 1.0)
    return LdrFrame(ldr, target_exposure, frame_index)


def adjust_exposure(ref: LdrFrame, target_exposure: float, gamma: float = GAMMA) -> LdrFrame:
    """Re-expose a gamma-encoded frame as if captured at ``target_exposure``."""
    _check_exposure(target_exposure)
    if target_exposure == ref.exposure:
        return LdrFrame(ref.image, ref.exposure, ref.frame_index)
    return linear_to_ldr(ldr_to_linear(ref, gamma), target_exposure, gamma, ref.frame_index)


def tonemap_mu(h, mu: float = MU) -> Tensor:
    """mu-law compression log(1 + mu*h) / log(1 + mu); expects h in [0, 1]."""
    if not mu > 0:
        raise ConfigError(f"mu must be positive, got {mu}")
    h = T.as_tensor(h)
    # same dtype as the numerator so that T(1) == 1 exactly
    denom = Tensor(np.log(np.asarray(1.0 + mu, dtype=h.dtype)))
    return T.log(h * mu + 1.0) / denom


def normalize_for_tonemap(h, white_point: float) -> Tensor:
    """Divide by the white point and clamp to [0, 1] ahead of :func:`tonemap_mu`."""
    return T.clip(T.as_tensor(h) * (1.0 / white_point), 0.0, 1.0)


def luminance_y(frame) -> Tensor:
    image = frame.image if isinstance(frame, LdrFrame) else T.as_tensor(frame)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"luminance needs a 3-channel image, got shape {image.shape}")
    d = image.data
    y = BT601[0] * d[0] + BT601[1] * d[1] + BT601[2] * d[2]
    return Tensor(y[None].astype(d.dtype))


def well_exposed_mask(frame, delta_low: float = DELTA_LOW,
                      delta_high: float = DELTA_HIGH) -> LuminanceMask:
    if not 0.0 <= delta_low < delta_high <= 1.0:
        raise ConfigError(f"need 0 <= delta_low < delta_high <= 1, got {delta_low}, {delta_high}")
    y = luminance_y(frame).data
    return LuminanceMask(Tensor(((y > delta_low) & (y < delta_high)).astype(y.dtype)))

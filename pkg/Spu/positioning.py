"""Center-of-gravity positioning: raw 9-bit (x, y) and 4-bit DOI from the eight channel integrals.

    x   = 0.5 * ((A1 + D1) / s1 + (A2 + D2) / s2)
    y   = 0.5 * ((A1 + B1) / s1 + (C2 + D2) / s2)
    DOI = s1 / (s1 + s2)

with s1 = A1 + B1 + C1 + D1 and s2 = A2 + B2 + C2 + D2. Each quantity is kept as an exact integer
fraction and rounded once (half up) after scaling by 511 (or 15 for DOI).

alternateY switches the end-2 term of y to (A2 + B2) / s2.
"""

from dataclasses import dataclass

import numpy as np

from Spu.eventModel import (
    DOI_MAX,
    RAW_MAX,
    ChannelIntegrals,
    Doi,
    RawPosition,
    ZeroSumEvent,
    roundHalfUp,
)


@dataclass(frozen=True)
class PositionResult:
    pos: RawPosition
    doi: Doi


def computePosition(ch, alternateY=False):
    if not isinstance(ch, ChannelIntegrals):
        ch = ChannelIntegrals.fromSequence(ch)
    s1, s2 = ch.s1, ch.s2
    if s1 == 0 or s2 == 0:
        raise ZeroSumEvent(f"zero light sum on one end (s1={s1}, s2={s2})")
    y2 = ch.a2 + ch.b2 if alternateY else ch.c2 + ch.d2
    den = 2 * s1 * s2
    x = roundHalfUp(RAW_MAX * ((ch.a1 + ch.d1) * s2 + (ch.a2 + ch.d2) * s1), den)
    y = roundHalfUp(RAW_MAX * ((ch.a1 + ch.b1) * s2 + y2 * s1), den)
    doi = roundHalfUp(DOI_MAX * s1, s1 + s2)
    return PositionResult(RawPosition(x, y), Doi(doi))


def computePositions(integrals, alternateY=False):
    """Batch form of computePosition.

    integrals is an (N, 8) array ordered A1 B1 C1 D1 A2 B2 C2 D2. Returns int64 arrays
    (x, y, doi, valid); rows with a zero end sum have valid False and zeros elsewhere.
    """
    ch = np.asarray(integrals, dtype=np.int64)
    a1, b1, c1, d1, a2, b2, c2, d2 = ch.T
    s1 = a1 + b1 + c1 + d1
    s2 = a2 + b2 + c2 + d2
    valid = (s1 > 0) & (s2 > 0)
    # Keeps the divisions defined for rejected rows.
    s1 = np.where(valid, s1, 1)
    s2 = np.where(valid, s2, 1)
    y2 = a2 + b2 if alternateY else c2 + d2
    den = 2 * s1 * s2
    x = roundHalfUp(RAW_MAX * ((a1 + d1) * s2 + (a2 + d2) * s1), den)
    y = roundHalfUp(RAW_MAX * ((a1 + b1) * s2 + y2 * s1), den)
    doi = roundHalfUp(DOI_MAX * s1, s1 + s2)
    x[~valid] = 0
    y[~valid] = 0
    doi[~valid] = 0
    return x, y, doi, valid

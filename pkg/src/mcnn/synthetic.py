"""Synthetic HA/NA corpora whose labels are fixed by embedded motifs.

Each subtype has its own protein family: a strain's HA sequence is a mutated
copy of its HA subtype's template, and likewise for NA.  Hosts are laid out on
a 5 x 5 table; the HA sequence carries a short motif for the host's row and the
NA sequence one for its column.  Host identity therefore needs both channels,
while each subtype is readable from its own channel.  Whole-sequence
similarity finds the right subtype family but says nothing about the host.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabelSchema, StrainRecord
from .seeding import rng_for
from .tokenizer import STANDARD_RESIDUES

HA_NAMES = ["H1", "H3", "H5", "H7", "H9"]
NA_NAMES = ["N1", "N2", "N6", "N8"]
MOTIF_LEN = 8
MOTIF_WINDOW = 8  # host motifs start within this many residues of the N-terminus
MIN_LENGTH_FRACTION = 1.0  # sequences keep at least this share of their family template
GRID = 5  # hosts are laid out on a GRID x GRID table

_AA = np.array(list(STANDARD_RESIDUES))


def synthetic_schema(n_ha: int = 5, n_na: int = 4) -> LabelSchema:
    hosts = LabelSchema.default().host_categories
    return LabelSchema(list(hosts), {h: h for h in hosts}, HA_NAMES[:n_ha], NA_NAMES[:n_na])


def _random_seq(rng: np.random.Generator, n: int) -> np.ndarray:
    return _AA[rng.integers(0, len(_AA), size=n)]


def _mutate(rng: np.random.Generator, seq: np.ndarray, rate: float) -> np.ndarray:
    seq = seq.copy()
    hit = rng.random(len(seq)) < rate
    seq[hit] = _AA[rng.integers(0, len(_AA), size=int(hit.sum()))]
    return seq


@dataclass
class MotifBank:
    """Motifs and lineage templates shared by every split drawn from one bank."""

    ha_families: list[np.ndarray]
    na_families: list[np.ndarray]
    host_row: list[np.ndarray]
    host_col: list[np.ndarray]

    @classmethod
    def create(cls, seed: int = 0, n_ha: int = 5, n_na: int = 4, ha_len: int = 80,
               na_len: int = 70) -> "MotifBank":
        rng = rng_for(seed, "motif-bank")
        seen: set[str] = set()

        def motif():
            while True:
                m = _random_seq(rng, MOTIF_LEN)
                if "".join(m) not in seen:
                    seen.add("".join(m))
                    return m

        return cls([_random_seq(rng, ha_len) for _ in range(n_ha)],
                   [_random_seq(rng, na_len) for _ in range(n_na)],
                   [motif() for _ in range(GRID)], [motif() for _ in range(GRID)])


def _compose(rng, template, motif, family_rate, noise, min_len) -> str:
    length = int(rng.integers(min_len, len(template) + 1))
    seq = _mutate(rng, template[:length], family_rate)
    start = int(rng.integers(0, MOTIF_WINDOW))
    seq[start:start + MOTIF_LEN] = _mutate(rng, motif, noise)
    return "".join(seq)


def make_corpus(n: int, seed: int = 0, bank: MotifBank | None = None, noise: float = 0.0,
                family_rate: float = 0.0, prefix: str = "syn", year: int = 2015,
                complete: bool = True) -> list[StrainRecord]:
    """``n`` strains with hosts dealt round-robin over all 25 categories.

    ``noise`` is the per-residue mutation rate applied to host motifs;
    ``family_rate`` the rate applied to subtype family templates.
    """
    bank = bank or MotifBank.create()
    schema = synthetic_schema(len(bank.ha_families), len(bank.na_families))
    rng = rng_for(seed, "corpus", prefix)
    hosts = np.resize(rng.permutation(GRID * GRID), n)
    out = []
    for i in range(n):
        h = int(hosts[i])
        row, col = divmod(h, GRID)
        ha_sub = int(rng.integers(len(bank.ha_families)))
        na_sub = int(rng.integers(len(bank.na_families)))
        ha_t, na_t = bank.ha_families[ha_sub], bank.na_families[na_sub]
        ha = _compose(rng, ha_t, bank.host_row[row], family_rate, noise,
                      int(len(ha_t) * MIN_LENGTH_FRACTION))
        na = _compose(rng, na_t, bank.host_col[col], family_rate, noise,
                      int(len(na_t) * MIN_LENGTH_FRACTION))
        host = schema.host_categories[h]
        out.append(StrainRecord(f"{prefix}{i:05d}", ha, na, host, host, schema.ha_classes[ha_sub],
                                schema.na_classes[na_sub], year, complete, "IRD",
                                f"{schema.ha_classes[ha_sub]}{schema.na_classes[na_sub]}"))
    return out

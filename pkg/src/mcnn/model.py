"""The multi-channel network: HA and NA trigram channels, three softmax heads.

Each channel embeds its trigram ids and encodes them to a fixed-width vector
with one of three encoders (``cnn``, ``bigru``, ``transformer``).  The two
channel vectors are concatenated and fed to independent dense heads for host,
HA subtype and NA subtype.  A missing channel contributes a zero vector at the
concatenation point, which is how single-sequence inference is handled.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import LabelSchema, StrainRecord
from .errors import CheckpointError, ConfigError, ContractError
from .layers import BiGruEncoder, CnnEncoder, Dense, Embedding, Module, TransformerEncoder
from .seeding import rng_for
from .tensor import Tensor
from .tokenizer import PAD_ID, TrigramVocab, build_vocab, encode, extract_ngrams

VARIANTS = ("cnn", "bigru", "transformer")
CHECKPOINT_MAGIC = b"MCNNCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class McnnConfig:
    variant: str = "cnn"
    embedding_size: int = 50
    kernel_size: int = 3
    num_heads: int = 1
    learning_rate: float = 0.001
    filters: int = 64
    hidden: int = 64
    ff_dim: int = 128
    depth: int = 1
    seed: int = 0
    max_len_ha: int = 600
    max_len_na: int = 500
    batch_size: int = 32
    patience: int = 5
    max_epochs: int = 100

    def __post_init__(self):
        self.validate()

    def violations(self) -> list[str]:
        out = []
        if self.variant not in VARIANTS:
            out.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("embedding_size", "filters", "hidden", "ff_dim", "depth", "max_len_ha",
                     "max_len_na", "batch_size", "max_epochs", "kernel_size", "num_heads"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                out.append(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.patience, int) or self.patience < 0:
            out.append(f"patience must be a non-negative integer, got {self.patience!r}")
        if not isinstance(self.learning_rate, (int, float)) or self.learning_rate <= 0:
            out.append(f"learning_rate must be positive, got {self.learning_rate!r}")
        if not isinstance(self.seed, int):
            out.append(f"seed must be an integer, got {self.seed!r}")
        if self.variant == "transformer" and not out:
            if self.embedding_size % self.num_heads:
                out.append(f"embedding_size {self.embedding_size} not divisible by "
                           f"num_heads {self.num_heads}")
            if self.embedding_size % 2:
                out.append("transformer embedding_size must be even")
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "McnnConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def replace(self, **changes) -> "McnnConfig":
        return McnnConfig.from_dict({**self.to_dict(), **changes})


def _make_encoder(cfg: McnnConfig, rng: np.random.Generator):
    d = cfg.embedding_size
    if cfg.variant == "cnn":
        return CnnEncoder(d, cfg.kernel_size, cfg.filters, rng)
    if cfg.variant == "bigru":
        return BiGruEncoder(d, cfg.hidden, rng)
    return TransformerEncoder(d, cfg.num_heads, cfg.ff_dim, cfg.depth, rng)


class Channel(Module):
    def __init__(self, vocab_size: int, cfg: McnnConfig, rng: np.random.Generator):
        self.embedding = Embedding(vocab_size, cfg.embedding_size, rng)
        self.encoder = _make_encoder(cfg, rng)
        self.out_dim = self.encoder.out_dim
        self.min_len = cfg.kernel_size if cfg.variant == "cnn" else 1

    def __call__(self, ids: np.ndarray) -> Tensor:
        width = max(int((ids != PAD_ID).sum(axis=1).max()), self.min_len)
        ids = ids[:, :width]
        return self.encoder(self.embedding(ids), ids != PAD_ID)


@dataclass
class Batch:
    ha_ids: np.ndarray
    na_ids: np.ndarray
    ha_present: np.ndarray
    na_present: np.ndarray
    targets: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ha_present)

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(self.ha_ids[idx], self.na_ids[idx], self.ha_present[idx],
                     self.na_present[idx], None if self.targets is None else self.targets[idx])


class McnnModel(Module):
    def __init__(self, config: McnnConfig, schema: LabelSchema, ha_vocab: TrigramVocab,
                 na_vocab: TrigramVocab):
        self.config = config
        self.schema = schema
        self.ha_vocab = ha_vocab
        self.na_vocab = na_vocab
        rng = rng_for(config.seed, "init")
        self.ha_channel = Channel(len(ha_vocab), config, rng)
        self.na_channel = Channel(len(na_vocab), config, rng)
        width = self.ha_channel.out_dim + self.na_channel.out_dim
        n_host, n_ha, n_na = schema.sizes
        self.host_head = Dense(width, n_host, rng)
        self.ha_head = Dense(width, n_ha, rng)
        self.na_head = Dense(width, n_na, rng)

    @classmethod
    def for_records(cls, config: McnnConfig, schema: LabelSchema,
                    records: Sequence[StrainRecord]) -> "McnnModel":
        """Build vocabularies from ``records`` (training data only) and a fresh model."""
        ha = [extract_ngrams(r.ha_seq) for r in records if r.ha_seq and len(r.ha_seq) >= 3]
        na = [extract_ngrams(r.na_seq) for r in records if r.na_seq and len(r.na_seq) >= 3]
        return cls(config, schema, build_vocab(ha), build_vocab(na))

    # inputs -------------------------------------------------------------

    def encode_sequences(self, ha_seqs: Sequence[str | None], na_seqs: Sequence[str | None],
                         targets=None) -> Batch:
        cfg = self.config

        def channel(seqs, vocab, max_len):
            ids = np.zeros((len(seqs), max_len), dtype=np.int64)
            present = np.zeros(len(seqs), dtype=bool)
            for i, seq in enumerate(seqs):
                if seq:
                    ids[i] = encode(extract_ngrams(seq), vocab, max_len)
                    present[i] = True
            return ids, present

        ha_ids, ha_present = channel(ha_seqs, self.ha_vocab, cfg.max_len_ha)
        na_ids, na_present = channel(na_seqs, self.na_vocab, cfg.max_len_na)
        if targets is not None:
            targets = np.asarray(targets, dtype=np.int64)
        return Batch(ha_ids, na_ids, ha_present, na_present, targets)

    def encode_records(self, records: Sequence[StrainRecord], with_labels: bool = True,
                       drop: str | None = None) -> Batch:
        """Tokenize records; ``drop`` in {"ha", "na"} masks that channel out."""
        targets = [self.schema.encode_labels(r) for r in records] if with_labels else None
        ha = [None if drop == "ha" else r.ha_seq for r in records]
        na = [None if drop == "na" else r.na_seq for r in records]
        return self.encode_sequences(ha, na, targets)

    # forward ------------------------------------------------------------

    def _channel_features(self, channel: Channel, ids: np.ndarray, present: np.ndarray) -> Tensor:
        n = len(present)
        rows = np.flatnonzero(present)
        if rows.size == 0:
            return T.as_tensor(np.zeros((n, channel.out_dim)))
        if rows.size == n:
            return channel(ids)
        return T.place_rows(channel(ids[rows]), rows, n)

    def logits(self, batch: Batch) -> tuple[Tensor, Tensor, Tensor]:
        missing = ~(batch.ha_present | batch.na_present)
        if missing.any():
            raise ContractError(f"sample {int(np.flatnonzero(missing)[0])} has neither HA nor NA")
        feats = T.concat([
            self._channel_features(self.ha_channel, batch.ha_ids, batch.ha_present),
            self._channel_features(self.na_channel, batch.na_ids, batch.na_present),
        ], axis=-1)
        return self.host_head(feats), self.ha_head(feats), self.na_head(feats)

    def probabilities(self, batch: Batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        with T.no_grad():
            return tuple(T.softmax(z).data for z in self.logits(batch))

    def loss(self, batch: Batch) -> Tensor:
        if batch.targets is None:
            raise ContractError("loss needs labelled batch")
        return loss_from_logits(self.logits(batch), batch.targets)

    # checkpoint ---------------------------------------------------------

    def vocab_hashes(self) -> dict[str, str]:
        return {"ha": self.ha_vocab.digest(), "na": self.na_vocab.digest()}

    def save(self, path) -> None:
        save(self, path)


def loss_from_logits(logits: Sequence[Tensor], targets: np.ndarray) -> Tensor:
    """Unweighted sum of the three heads' mean cross-entropies."""
    targets = np.asarray(targets, dtype=np.int64)
    total = None
    for j, z in enumerate(logits):
        ce = T.softmax_cross_entropy(z, targets[:, j])
        total = ce if total is None else T.add(total, ce)
    return total


def forward(model: McnnModel, ha_ids=None, na_ids=None):
    """Three probability vectors for one sample given encoded id sequences."""
    if ha_ids is None and na_ids is None:
        raise ContractError("forward needs at least one channel")
    cfg = model.config

    def row(ids, max_len):
        out = np.zeros((1, max_len), dtype=np.int64)
        if ids is not None:
            ids = np.asarray(ids, dtype=np.int64)[:max_len]
            out[0, :len(ids)] = ids
        return out

    batch = Batch(row(ha_ids, cfg.max_len_ha), row(na_ids, cfg.max_len_na),
                  np.array([ha_ids is not None]), np.array([na_ids is not None]))
    return tuple(p[0] for p in model.probabilities(batch))


@dataclass
class Prediction:
    host: str
    ha_subtype: str
    na_subtype: str
    confidences: tuple[float, float, float]


def argmax_rows(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lower class index
    return np.argmax(probs, axis=-1)


def predict_batch(model: McnnModel, batch: Batch) -> list[Prediction]:
    probs = model.probabilities(batch)
    idx = [argmax_rows(p) for p in probs]
    names = (model.schema.host_categories, model.schema.ha_classes, model.schema.na_classes)
    out = []
    for i in range(len(batch)):
        out.append(Prediction(*(names[j][idx[j][i]] for j in range(3)),
                              tuple(float(probs[j][i, idx[j][i]]) for j in range(3))))
    return out


def predict(model: McnnModel, ha_seq: str | None = None, na_seq: str | None = None) -> Prediction:
    return predict_batch(model, model.encode_sequences([ha_seq], [na_seq]))[0]


# checkpoint container ---------------------------------------------------

def save(model: McnnModel, path) -> None:
    """Write ``magic | u32 version | u64 header length | header JSON | float64 blocks``."""
    params = list(model.named_parameters())
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for _, p in params)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "schema": model.schema.to_dict(),
        "ha_vocab": json.loads(model.ha_vocab.to_json()),
        "na_vocab": json.loads(model.na_vocab.to_json()),
        "vocab_hashes": model.vocab_hashes(),
        "params": [{"name": n, "shape": list(p.shape)} for n, p in params],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        fh.write(payload)
    os.replace(tmp, path)


def load(path, expected_vocab_hashes: dict[str, str] | None = None) -> McnnModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    prefix = len(CHECKPOINT_MAGIC) + 12
    if len(blob) < prefix or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic or truncated header)")
    version, head_len = struct.unpack("<IQ", blob[len(CHECKPOINT_MAGIC):prefix])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(blob) < prefix + head_len:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[prefix:prefix + head_len].decode("utf-8"))
        config = McnnConfig.from_dict(header["config"])
        schema = LabelSchema.from_dict(header["schema"])
        ha_vocab = TrigramVocab.from_json(json.dumps(header["ha_vocab"]))
        na_vocab = TrigramVocab.from_json(json.dumps(header["na_vocab"]))
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    hashes = {"ha": ha_vocab.digest(), "na": na_vocab.digest()}
    if header.get("vocab_hashes") != hashes:
        raise CheckpointError("embedded vocabulary does not match its recorded hash")
    if expected_vocab_hashes is not None and expected_vocab_hashes != hashes:
        raise CheckpointError("checkpoint vocabulary differs from the expected vocabulary")
    payload = blob[prefix + head_len:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError("parameter payload is truncated or corrupt")

    model = McnnModel(config, schema, ha_vocab, na_vocab)
    params = list(model.named_parameters())
    declared = [(p["name"], tuple(p["shape"])) for p in header["params"]]
    if declared != [(n, p.shape) for n, p in params]:
        raise CheckpointError("parameter layout does not match the embedded config")
    offset = 0
    for _, p in params:
        nbytes = p.data.size * 8
        if offset + nbytes > len(payload):
            raise CheckpointError("parameter payload is truncated")
        p.data = np.frombuffer(payload, dtype="<f8", count=p.data.size,
                               offset=offset).reshape(p.shape).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError("trailing bytes after parameter payload")
    return model

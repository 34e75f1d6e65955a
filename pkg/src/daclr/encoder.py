"""Lightweight trainable text encoder.

Text is hashed into a bag of unigram and bigram buckets, L1-normalised,
projected to ``embed_dim`` dimensions, squashed with tanh and L2-normalised.
The same body encodes a joint "claim [SEP] evidence" string for the
cross-scorer, which adds a single affine output unit.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .sparse import tokenize

SEP = " [SEP] "
HASH_SALT = b"daclr-fh-v1"
CHECKPOINT_MAGIC = b"DACLR-CKPT\n"
CHECKPOINT_VERSION = 1


class NumericalError(FloatingPointError):
    def __init__(self, block: str, detail: str = "non-finite value"):
        super().__init__(f"{detail} in {block}")
        self.block = block


class CheckpointError(ValueError):
    pass


def hash_bucket(key: str, hash_dim: int) -> int:
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8, salt=HASH_SALT).digest()
    return int.from_bytes(digest, "little") % hash_dim


def feature_keys(text: str) -> list[str]:
    toks = tokenize(text)
    return toks + [f"{a}_{b}" for a, b in zip(toks, toks[1:])]


@lru_cache(maxsize=1 << 18)
def _features(text: str, hash_dim: int) -> tuple[np.ndarray, np.ndarray]:
    counts: dict[int, float] = {}
    for key in feature_keys(text):
        b = hash_bucket(key, hash_dim)
        counts[b] = counts.get(b, 0.0) + 1.0
    idx = np.array(sorted(counts), dtype=np.int64)
    val = np.array([counts[i] for i in idx], dtype=np.float64)
    idx.flags.writeable = False
    val.flags.writeable = False
    return idx, val


def featurize(text: str, hash_dim: int) -> dict[int, float]:
    """Hashed unigram+bigram counts as ``{bucket: count}``."""
    if hash_dim < 1:
        raise ValueError("hash_dim must be >= 1")
    idx, val = _features(text, hash_dim)
    return {int(i): float(v) for i, v in zip(idx, val)}


@dataclass
class EncoderModel:
    projection: np.ndarray  # (hash_dim, embed_dim)
    head_w: np.ndarray  # (embed_dim,)
    head_b: float
    rng_seed: int = 0

    def __post_init__(self) -> None:
        self.projection = np.ascontiguousarray(self.projection, dtype=np.float64)
        self.head_w = np.ascontiguousarray(self.head_w, dtype=np.float64)
        self.head_b = float(self.head_b)
        h, d = self.projection.shape
        if d < 2 or h < d:
            raise ValueError(f"need embed_dim >= 2 and hash_dim >= embed_dim, got H={h}, d={d}")
        if self.head_w.shape != (d,):
            raise ValueError("head_w must have shape (embed_dim,)")

    @property
    def hash_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.projection.shape[1]

    @classmethod
    def init(
        cls, hash_dim: int = 1 << 15, embed_dim: int = 64, seed: int = 0, scale: float = 1.0
    ) -> "EncoderModel":
        rng = np.random.default_rng(seed)
        proj = rng.normal(0.0, scale, size=(hash_dim, embed_dim))
        head = rng.normal(0.0, 1.0 / np.sqrt(embed_dim), size=embed_dim)
        return cls(proj, head, 0.0, seed)

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.projection.copy(), self.head_w.copy(), self.head_b, self.rng_seed)

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.projection)):
            raise NumericalError("projection")
        if not np.all(np.isfinite(self.head_w)) or not np.isfinite(self.head_b):
            raise NumericalError("score_head")

    # -- persistence --------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {
            "version": CHECKPOINT_VERSION,
            "hash_dim": self.hash_dim,
            "embed_dim": self.embed_dim,
            "rng_seed": self.rng_seed,
            "head_b": self.head_b.hex(),
            "dtype": "<f8",
        }
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        return b"".join(
            [
                CHECKPOINT_MAGIC,
                struct.pack("<Q", len(hb)),
                hb,
                self.projection.astype("<f8").tobytes(order="C"),
                self.head_w.astype("<f8").tobytes(),
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncoderModel":
        if not data.startswith(CHECKPOINT_MAGIC):
            raise CheckpointError("not a checkpoint file")
        off = len(CHECKPOINT_MAGIC)
        (n,) = struct.unpack_from("<Q", data, off)
        off += 8
        header = json.loads(data[off : off + n])
        off += n
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
        h, d = header["hash_dim"], header["embed_dim"]
        need = off + 8 * (h * d + d)
        if len(data) != need:
            raise CheckpointError(f"checkpoint size mismatch: {len(data)} != {need}")
        proj = np.frombuffer(data, "<f8", h * d, off).reshape(h, d).astype(np.float64)
        head = np.frombuffer(data, "<f8", d, off + 8 * h * d).astype(np.float64)
        return cls(proj, head, float.fromhex(header["head_b"]), int(header["rng_seed"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "EncoderModel":
        return cls.from_bytes(Path(path).read_bytes())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


@dataclass
class EncodedBatch:
    """Embeddings for a list of texts plus what the backward pass needs."""

    emb: np.ndarray  # (n, d) unit rows
    rows: np.ndarray  # projection rows touched, sorted
    feats: sp.csr_matrix  # (n, len(rows)) L1-normalised features
    act: np.ndarray  # tanh activations (n, d)
    norm: np.ndarray  # ||act|| per row; 0 marks the e_1 fallback


def _feature_matrix(texts: Sequence[str], hash_dim: int) -> tuple[sp.csr_matrix, np.ndarray]:
    feats = [_features(t, hash_dim) for t in texts]
    lengths = np.array([len(i) for i, _ in feats], dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(lengths)])
    if indptr[-1] == 0:
        return sp.csr_matrix((len(texts), 0)), np.zeros(0, dtype=np.int64)
    idx = np.concatenate([i for i, _ in feats])
    val = np.concatenate([v / v.sum() if len(v) else v for _, v in feats])
    rows, local = np.unique(idx, return_inverse=True)
    mat = sp.csr_matrix((val, local, indptr), shape=(len(texts), len(rows)))
    return mat, rows


def encode_batch(model: EncoderModel, texts: Sequence[str]) -> EncodedBatch:
    feats, rows = _feature_matrix(texts, model.hash_dim)
    d = model.embed_dim
    if len(rows):
        z = np.asarray(feats @ model.projection[rows])
    else:
        z = np.zeros((len(texts), d))
    act = np.tanh(z)
    norm = np.linalg.norm(act, axis=1)
    emb = np.zeros_like(act)
    ok = norm > 0
    emb[ok] = act[ok] / norm[ok, None]
    emb[~ok, 0] = 1.0
    return EncodedBatch(emb, rows, feats, act, np.where(ok, norm, 0.0))


def backward(enc: EncodedBatch, d_emb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient w.r.t. the touched projection rows, given dLoss/dEmbedding.

    Returns ``(rows, grad_rows)`` with ``grad_rows[k]`` the gradient of
    projection row ``rows[k]``.
    """
    e = enc.emb
    ok = enc.norm > 0
    radial = np.einsum("ij,ij->i", e, d_emb)
    d_act = np.zeros_like(d_emb)
    d_act[ok] = (d_emb[ok] - e[ok] * radial[ok, None]) / enc.norm[ok, None]
    d_z = d_act * (1.0 - enc.act**2)
    if not len(enc.rows):
        return enc.rows, np.zeros((0, e.shape[1]))
    return enc.rows, np.asarray(enc.feats.T @ d_z)


def encode(model: EncoderModel, text: str) -> np.ndarray:
    return encode_batch(model, [text]).emb[0]


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.dot(u, v))


def joint_text(claim_text: str, evidence_text: str) -> str:
    return claim_text + SEP + evidence_text


def cross_score_batch(model: EncoderModel, claim_text: str, evidence_texts: Sequence[str]) -> np.ndarray:
    enc = encode_batch(model, [joint_text(claim_text, t) for t in evidence_texts])
    return enc.emb @ model.head_w + model.head_b


def cross_score(model: EncoderModel, claim_text: str, evidence_text: str) -> float:
    return float(cross_score_batch(model, claim_text, [evidence_text])[0])

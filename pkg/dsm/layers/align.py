"""Text-embedding banks and cosine-softmax classification of queries."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt

from dsm.constants import PROMPT_TEMPLATE, TEXT_BANK_MAGIC
from dsm.core.container import blob, read_container, take_blob, write_container
from dsm.core.tensor import (
    Tensor,
    constant,
    masked_softmax,
    matmul,
    mul,
    row_normalize,
)
from dsm.errors import ContractError, DataError
from dsm.layers.module import Linear
from dsm.models import TextBankHeader

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TextEmbeddingBank:
    """Ordered class names with one embedding row each."""

    names: tuple[str, ...]
    embeddings: npt.NDArray[np.float32]
    template: str = PROMPT_TEMPLATE

    def __post_init__(self) -> None:
        """Validate names and rows."""
        if len(set(self.names)) != len(self.names):
            msg = "text bank has duplicate class names"
            raise DataError(msg)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.names):  # noqa: PLR2004
            msg = f"text bank rows {self.embeddings.shape} do not match {len(self.names)} names"
            raise DataError(msg)
        if (np.linalg.norm(self.embeddings, axis=1) <= 0).any():
            msg = "text bank has a zero embedding"
            raise DataError(msg)

    @property
    def dim(self) -> int:
        """Embedding width."""
        return int(self.embeddings.shape[1])

    def prompts(self) -> list[str]:
        """Text prompts the embeddings stand for."""
        return [self.template.replace("{CLS}", name) for name in self.names]

    def extended(self, names: Sequence[str], embeddings: npt.NDArray[np.float32]) -> "TextEmbeddingBank":
        """A bank with extra classes appended."""
        return TextEmbeddingBank(
            names=(*self.names, *names),
            embeddings=np.concatenate([self.embeddings, embeddings.astype(np.float32)]),
            template=self.template,
        )

    def subset(self, names: Sequence[str]) -> "TextEmbeddingBank":
        """A bank restricted to ``names`` in the given order."""
        missing = [name for name in names if name not in self.names]
        if missing:
            msg = f"text bank has no embedding for {missing}"
            raise DataError(msg)
        rows = [self.names.index(name) for name in names]
        return TextEmbeddingBank(tuple(names), self.embeddings[rows], self.template)


def orthonormal_bank(names: Sequence[str], dim: int, seed: int) -> TextEmbeddingBank:
    """Synthetic bank with mutually orthogonal unit rows."""
    if dim < len(names):
        msg = f"cannot fit {len(names)} orthogonal rows in dimension {dim}"
        raise DataError(msg)
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, len(names))))
    return TextEmbeddingBank(tuple(names), basis.T.astype(np.float32))


def write_text_bank(path: Path, bank: TextEmbeddingBank) -> None:
    """Write a ``.dsmtxt`` file."""
    header = TextBankHeader(dim=bank.dim, names=list(bank.names), template=bank.template)
    write_container(path, TEXT_BANK_MAGIC, header, [blob(bank.embeddings.astype(np.float32))])


def load_text_bank(path: Path) -> TextEmbeddingBank:
    """Read and validate a ``.dsmtxt`` file."""
    header, payload = read_container(path, TEXT_BANK_MAGIC, TextBankHeader)
    expected = len(header.names) * header.dim * 4
    if len(payload) != expected:
        msg = f"text bank payload has {len(payload)} bytes, expected {expected}"
        raise DataError(msg)
    embeddings = take_blob(payload, 0, (len(header.names), header.dim), np.float32)
    logger.debug("loaded %s text embeddings from %s", len(header.names), path)
    return TextEmbeddingBank(tuple(header.names), embeddings, header.template)


def cosine_softmax(projected: Tensor, bank: TextEmbeddingBank, temperature: float) -> Tensor:
    """Softmax over classes of cosine similarity / τ, one row per query."""
    unit_bank = bank.embeddings / np.linalg.norm(bank.embeddings, axis=1, keepdims=True)
    similarity = matmul(row_normalize(projected), constant(unit_bank.T, dtype=projected.dtype))
    return masked_softmax(mul(similarity, 1 / temperature))


def classify_queries(
    queries: Tensor,
    head: Linear,
    bank: TextEmbeddingBank,
    temperature: float,
    *,
    training: bool = False,
) -> Tensor:
    """
    Class probabilities of every query against every bank entry.

    While training each query owns exactly one bank row; at inference the
    bank may carry extra classes.
    """
    if training and queries.shape[0] != len(bank.names):
        msg = f"{queries.shape[0]} queries but the training bank has {len(bank.names)} classes"
        raise ContractError(msg)
    return cosine_softmax(head(queries), bank, temperature)

"""k-means mask state space decoder block."""

import logging
from typing import Literal

import numpy as np

from dsm.core.tensor import (
    DType,
    Tensor,
    add,
    argmax_straight_through,
    constant,
    matmul,
    scale_rows,
    silu,
    transpose,
)
from dsm.errors import ContractError
from dsm.layers.module import Linear, Module
from dsm.layers.ssm import Direction, SsmLayer

logger = logging.getLogger(__name__)

type ClusterNorm = Literal["sum", "mean"]


def affinity(queries: Tensor, features: Tensor, spatial_ssm: SsmLayer) -> Tensor:
    """Query/feature inner products, each query row filtered along space."""
    if queries.ndim != 2 or features.ndim != 2 or queries.shape[1] != features.shape[1]:  # noqa: PLR2004
        msg = f"affinity: queries {queries.shape} and features {features.shape} do not align"
        raise ContractError(msg)
    return spatial_ssm(matmul(queries, transpose(features)))


def querywise_argmax(scores: Tensor) -> Tensor:
    """One-hot assignment of every position to its best query."""
    return argmax_straight_through(scores)


def aggregate(assignment: Tensor, features: Tensor, cluster_norm: ClusterNorm = "sum") -> Tensor:
    """Per-query sum (or mean) of the features assigned to it."""
    if assignment.shape[1] != features.shape[0]:
        msg = f"aggregate: assignment {assignment.shape} and features {features.shape} do not align"
        raise ContractError(msg)
    clusters = matmul(assignment, features)
    if cluster_norm == "sum":
        return clusters
    sizes = assignment.data.sum(axis=1)
    inverse = np.where(sizes > 0, 1 / np.maximum(sizes, 1), 0)
    return scale_rows(clusters, constant(inverse, dtype=clusters.dtype))


class KmmmBlock(Module):
    """
    One decoder layer updating queries against a flattened feature map.

    Default path: spatially filtered affinity, query-wise argmax, cluster
    aggregation, SiLU, query-axis state space filter and a residual
    projection. With ``classic_attention`` the layer is plain cross
    attention with a query-wise argmax in place of the softmax.
    """

    def __init__(
        self,
        width: int,
        queries: int,
        state_dim: int,
        rng: np.random.Generator,
        *,
        dtype: DType,
        direction: Direction = "forward",
        query_ssm: bool = True,
        cluster_norm: ClusterNorm = "sum",
        classic_attention: bool = False,
    ) -> None:
        self.classic_attention = classic_attention
        self.cluster_norm: ClusterNorm = cluster_norm
        self.spatial_ssm: SsmLayer | None = None
        self.query_ssm: SsmLayer | None = None
        self.query_proj: Linear | None = None
        self.key_proj: Linear | None = None
        self.value_proj: Linear | None = None
        if classic_attention:
            self.query_proj = Linear(width, width, rng, dtype=dtype)
            self.key_proj = Linear(width, width, rng, dtype=dtype)
            self.value_proj = Linear(width, width, rng, dtype=dtype)
        else:
            self.spatial_ssm = SsmLayer(queries, state_dim, rng, dtype=dtype, direction=direction)
            if query_ssm:
                self.query_ssm = SsmLayer(width, state_dim, rng, dtype=dtype, direction=direction)
        self.out_proj = Linear(width, width, rng, dtype=dtype)

    def _classic(self, queries: Tensor, features: Tensor) -> tuple[Tensor, Tensor]:
        if self.query_proj is None or self.key_proj is None or self.value_proj is None:
            msg = "classic attention projections are missing"
            raise ContractError(msg)
        scores = matmul(self.query_proj(queries), transpose(self.key_proj(features)))
        assignment = querywise_argmax(scores)
        return add(queries, matmul(assignment, self.value_proj(features))), scores

    def __call__(self, queries: Tensor, features: Tensor) -> tuple[Tensor, Tensor]:
        """Return the updated N×C queries and the N×L affinity."""
        if self.classic_attention:
            return self._classic(queries, features)
        if self.spatial_ssm is None:
            msg = "spatial state space filter is missing"
            raise ContractError(msg)
        scores = affinity(queries, features, self.spatial_ssm)
        assignment = querywise_argmax(scores)
        update = silu(aggregate(assignment, features, self.cluster_norm))
        if self.query_ssm is not None:
            update = transpose(self.query_ssm(transpose(update)))
        return add(queries, self.out_proj(update)), scores

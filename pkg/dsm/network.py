"""End-to-end segmentation network: organ stage and tumor stage."""

import logging
from dataclasses import dataclass

import numpy as np

from dsm.core.config import AblationSettings, ModelSettings
from dsm.core.tensor import (
    FloatArray,
    Tensor,
    add,
    as_rows,
    downsample2,
    matmul,
    parameter,
    sigmoid,
    transpose,
)
from dsm.layers.align import TextEmbeddingBank, classify_queries
from dsm.layers.anomaly import anomaly_score, mask_prompt, normalize_minmax, open_mask
from dsm.layers.backbone import Backbone, FeaturePyramid
from dsm.layers.dqr import DqrBlock, JointSelfAttention
from dsm.layers.kmmm import KmmmBlock
from dsm.layers.module import Linear, Module

logger = logging.getLogger(__name__)

STAGE1_PREFIXES = ("backbone.", "organ_queries", "organ_in.", "organ_out.", "kmmm.")
QUERY_INIT_SCALE = 0.5


@dataclass(frozen=True)
class Stage1Output:
    """Organ queries, their soft masks and the per-scale affinities."""

    organs: Tensor
    masks: Tensor
    affinities: tuple[Tensor, ...]
    pyramid: FeaturePyramid


@dataclass(frozen=True)
class Stage2Output:
    """Masks of every query, class probabilities and anomaly maps."""

    masks: Tensor
    probabilities: Tensor | None
    anomaly_maps: tuple[FloatArray, ...]
    prompts: tuple[FloatArray, ...]
    stage1: Stage1Output


def is_stage1_parameter(name: str) -> bool:
    """Whether a parameter belongs to the organ stage."""
    return name.startswith(STAGE1_PREFIXES)


def soft_masks(queries: Tensor, embedding: Tensor) -> Tensor:
    """sigmoid(queries · embeddingᵀ), one row per query over all voxels."""
    return sigmoid(matmul(queries, transpose(as_rows(embedding))))


class DsmNetwork(Module):
    """
    Backbone, organ decoder and tumor decoder with their queries.

    Query k stands for the k-th trained class: organs first, then the
    tumors seen in training. Every parameter of both stages exists from construction so
    that a stage-1 checkpoint can seed a stage-2 network by name.
    """

    def __init__(
        self,
        settings: ModelSettings,
        ablation: AblationSettings,
        patch_size: int,
        seed: int,
    ) -> None:
        rng = np.random.default_rng(seed)
        dtype = settings.dtype
        width = settings.width
        scales = tuple(reversed(settings.channels))
        self.settings = settings
        self.ablation = ablation

        self.backbone = Backbone(settings.channels, width, patch_size, rng, dtype=dtype)
        self.organ_queries = parameter(
            rng.standard_normal((settings.organ_queries, width)) * QUERY_INIT_SCALE,
            dtype=dtype,
        )
        self.organ_in = [Linear(width, channels, rng, dtype=dtype) for channels in scales]
        self.organ_out = [Linear(channels, width, rng, dtype=dtype) for channels in scales]
        self.kmmm = [
            KmmmBlock(
                channels,
                settings.organ_queries,
                settings.state_dim,
                rng,
                dtype=dtype,
                direction=settings.ssm_direction,
                query_ssm=settings.query_ssm,
                cluster_norm=settings.cluster_norm,
                classic_attention=not ablation.kmmm,
            )
            for channels in scales
        ]

        self.tumor_queries = parameter(
            rng.standard_normal((settings.tumor_queries, width)) * QUERY_INIT_SCALE,
            dtype=dtype,
        )
        next_scales: tuple[int | None, ...] = (*scales[1:], None)
        self.dqr = [
            DqrBlock(
                channels,
                following,
                width,
                settings.guidance_channels,
                settings.heads,
                rng,
                dtype=dtype,
                kappa_init=settings.kappa_init,
                diffuse=ablation.dqr,
                anomaly_channel=not ablation.amvp,
                guidance_in=width if settings.guidance_source == "deep" else None,
            )
            for channels, following in zip(scales, next_scales, strict=True)
        ]
        self.joint = JointSelfAttention(width, settings.heads, rng, dtype=dtype)
        self.text_head = Linear(width, settings.text_dim, rng, dtype=dtype)

    def stage1_parameters(self) -> list[tuple[str, Tensor]]:
        """Parameters trained in the organ stage."""
        return [(name, tensor) for name, tensor in self.named_parameters() if is_stage1_parameter(name)]

    def stage1_forward(self, volume: Tensor) -> Stage1Output:
        """Organ queries through four k-means blocks, then their soft masks."""
        pyramid = self.backbone(volume)
        queries = self.organ_queries
        affinities = []
        for project_in, block, project_out, features in zip(
            self.organ_in, self.kmmm, self.organ_out, pyramid.features, strict=True
        ):
            updated, scores = block(project_in(queries), as_rows(features))
            queries = add(queries, project_out(updated))
            affinities.append(scores)
        return Stage1Output(
            organs=queries,
            masks=soft_masks(queries, pyramid.embedding),
            affinities=tuple(affinities),
            pyramid=pyramid,
        )

    def _deep_guidance(self, embedding: Tensor, stride: int) -> Tensor:
        guidance = embedding
        while stride > 1:
            guidance = downsample2(guidance)
            stride //= 2
        return guidance

    def stage2_forward(
        self,
        volume: Tensor,
        bank: TextEmbeddingBank | None = None,
        *,
        training: bool = False,
    ) -> Stage2Output:
        """Organ stage, prompted tumor refinement, joint attention and class alignment."""
        stage1 = self.stage1_forward(volume)
        pyramid = stage1.pyramid
        tumors = self.tumor_queries
        fused: Tensor | None = None
        anomaly_maps = []
        prompts = []
        for level, block in enumerate(self.dqr):
            features = pyramid.features[level]
            if fused is not None:
                features = add(features, fused)
            normalized = normalize_minmax(anomaly_score(stage1.affinities[level].data))
            positions = normalized.shape[0]
            prompt = mask_prompt(normalized) if self.ablation.amvp else open_mask(positions, features.dtype)
            anomaly_maps.append(normalized.reshape(features.shape[1:]))
            prompts.append(prompt)
            guidance_source = None
            if self.settings.guidance_source == "deep":
                guidance_source = self._deep_guidance(pyramid.embedding, pyramid.strides[level])
            tumors, fused = block(
                features,
                tumors,
                prompt,
                anomaly=None if self.ablation.amvp else normalized,
                guidance_source=guidance_source,
            )
        queries = self.joint(stage1.organs, tumors)
        probabilities = None
        if bank is not None and self.ablation.text_align:
            probabilities = classify_queries(
                queries,
                self.text_head,
                bank,
                self.settings.temperature,
                training=training,
            )
        logger.debug("stage 2 open prompt fraction %s", [float(np.mean(p == 0)) for p in prompts])
        return Stage2Output(
            masks=soft_masks(queries, pyramid.embedding),
            probabilities=probabilities,
            anomaly_maps=tuple(anomaly_maps),
            prompts=tuple(prompts),
            stage1=stage1,
        )

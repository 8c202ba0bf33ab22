"""
Toy-scale video and text encoders.

The video branch embeds patches, adds learned spatial and temporal position
embeddings plus a [CLS] token, then runs divided space-time blocks: temporal
attention across frames at each spatial location, spatial attention within
each frame, then a feed-forward layer. The [CLS] query attends to every
token while grouped queries see their own group plus the [CLS] key.
"""
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, ShapeError
from .layers import (Component, FeedForward, LayerNorm, Linear, MultiHeadAttention, attend,
                     key_padding_mask, merge_heads, split_heads)
from .substrate import Tensor, concat, l2_normalize
from .textproc import PAD, TokenSequence
from .videoproc import VideoTensor

logger = logging.getLogger(__name__)

TEMPERATURE_INIT = 0.07


def _check_dims(dim: int, heads: int, layers: int) -> None:
    if layers < 1:
        raise ConfigurationError(f'need at least one layer, got {layers}')
    if heads < 1 or dim % heads:
        raise ConfigurationError(f'model dim {dim} is not divisible by {heads} heads')


@dataclass
class VideoEncoderConfig:
    layers: int = 2
    dim: int = 32
    heads: int = 4
    patch_size: int = 8
    channels: int = 3
    max_frames: int = 16
    max_patches: int = 16
    ffn_multiplier: int = 2
    dropout: float = 0.0

    def __post_init__(self) -> None:
        _check_dims(self.dim, self.heads, self.layers)


@dataclass
class TextEncoderConfig:
    layers: int = 2
    dim: int = 32
    heads: int = 4
    max_length: int = 32
    vocab_size: int = 128
    ffn_multiplier: int = 2
    dropout: float = 0.0

    def __post_init__(self) -> None:
        _check_dims(self.dim, self.heads, self.layers)


@dataclass
class Embedding:
    cls: Tensor
    tokens: Tensor
    lengths: np.ndarray | None = None

    @property
    def mask(self) -> np.ndarray | None:
        return None if self.lengths is None else key_padding_mask(self.lengths, self.tokens.shape[1])


def _divided_attention(attention: MultiHeadAttention, x: Tensor, frames: int, patches: int, over: str) -> Tensor:
    batch, _, dim = x.shape
    heads = attention.heads
    head_dim = dim // heads
    q, k, v = (split_heads(proj(x), heads) for proj in (attention.query, attention.key, attention.value))
    cls_out = attend(q[:, :, :1], k, v)

    def group(t: Tensor) -> Tensor:
        t = t[:, :, 1:].reshape(batch, heads, frames, patches, head_dim)
        return t.transpose(0, 1, 3, 2, 4) if over == 'time' else t

    gq, gk, gv = group(q), group(k), group(v)
    groups = gq.shape[2]

    def with_cls(grouped: Tensor, full: Tensor) -> Tensor:
        cls = full[:, :, :1].reshape(batch, heads, 1, 1, head_dim).broadcast_to((batch, heads, groups, 1, head_dim))
        return concat([cls, grouped], axis=3)

    out = attend(gq, with_cls(gk, k), with_cls(gv, v))
    if over == 'time':
        out = out.transpose(0, 1, 3, 2, 4)
    out = concat([cls_out, out.reshape(batch, heads, frames * patches, head_dim)], axis=2)
    return attention.output(merge_heads(out))


@dataclass
class DividedSpaceTimeBlock(Component):
    norm_time: LayerNorm
    time_attention: MultiHeadAttention
    norm_space: LayerNorm
    space_attention: MultiHeadAttention
    norm_ffn: LayerNorm
    ffn: FeedForward

    @classmethod
    def create(cls, rng: np.random.Generator, config: VideoEncoderConfig) -> 'DividedSpaceTimeBlock':
        return cls(
            LayerNorm.create(config.dim), MultiHeadAttention.create(rng, config.dim, config.heads),
            LayerNorm.create(config.dim), MultiHeadAttention.create(rng, config.dim, config.heads),
            LayerNorm.create(config.dim), FeedForward.create(rng, config.dim, config.ffn_multiplier, config.dropout),
        )

    def __call__(self, x: Tensor, frames: int, patches: int, training: bool = False, rng=None) -> Tensor:
        x = x + _divided_attention(self.time_attention, self.norm_time(x), frames, patches, 'time')
        x = x + _divided_attention(self.space_attention, self.norm_space(x), frames, patches, 'space')
        return x + self.ffn(self.norm_ffn(x), training, rng)


def patchify(videos: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, F, H, W) -> (B, F * gh * gw, C * p * p), frame-major patch order."""
    batch, channels, frames, height, width = videos.shape
    if height % patch_size or width % patch_size:
        raise ShapeError(f'patch size {patch_size} does not divide frames of {height}x{width}')
    gh, gw, p = height // patch_size, width // patch_size, patch_size
    return (
        videos.reshape(batch, channels, frames, gh, p, gw, p)
        .transpose(0, 2, 3, 5, 1, 4, 6)
        .reshape(batch, frames * gh * gw, channels * p * p)
    )


@dataclass
class VideoEncoder(Component):
    config: VideoEncoderConfig
    patch_embed: Linear
    cls_token: Tensor
    spatial_position: Tensor
    temporal_position: Tensor
    blocks: list
    norm: LayerNorm

    @classmethod
    def create(cls, config: VideoEncoderConfig, rng: np.random.Generator) -> 'VideoEncoder':
        patch_dim = config.channels * config.patch_size ** 2
        return cls(
            config,
            Linear.create(rng, patch_dim, config.dim),
            Tensor(rng.normal(0.0, 0.02, (1, 1, config.dim)), requires_grad=True),
            Tensor(rng.normal(0.0, 0.02, (config.max_patches, config.dim)), requires_grad=True),
            Tensor(rng.normal(0.0, 0.02, (config.max_frames, config.dim)), requires_grad=True),
            [DividedSpaceTimeBlock.create(rng, config) for _ in range(config.layers)],
            LayerNorm.create(config.dim),
        )

    def __call__(self, videos, training: bool = False, rng=None) -> Embedding:
        payload = np.stack([v.payload for v in videos]) if isinstance(videos, (list, tuple)) else videos
        payload = np.asarray(payload, dtype=np.float64)
        batch, channels, frames, height, width = payload.shape
        config = self.config
        if channels != config.channels:
            raise ShapeError(f'encoder expects {config.channels} channels, got {channels}')
        patches = (height // config.patch_size) * (width // config.patch_size)
        tokens = patchify(payload, config.patch_size)
        if frames > config.max_frames or patches > config.max_patches:
            raise ShapeError(f'{frames} frames x {patches} patches exceed the configured '
                             f'{config.max_frames} x {config.max_patches}')
        position = (self.spatial_position[:patches].reshape(1, patches, config.dim)
                    + self.temporal_position[:frames].reshape(frames, 1, config.dim))
        x = self.patch_embed(Tensor(tokens)) + position.reshape(1, frames * patches, config.dim)
        x = concat([self.cls_token.broadcast_to((batch, 1, config.dim)), x], axis=1)
        for block in self.blocks:
            x = block(x, frames, patches, training, rng)
        x = self.norm(x)
        return Embedding(x[:, 0], x)


def encode_video(video: VideoTensor, encoder: VideoEncoder) -> Embedding:
    embedding = encoder([video])
    return Embedding(embedding.cls[0], embedding.tokens[0])


@dataclass
class TextBlock(Component):
    norm_attention: LayerNorm
    attention: MultiHeadAttention
    norm_ffn: LayerNorm
    ffn: FeedForward

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, heads: int, multiplier: int, rate: float) -> 'TextBlock':
        return cls(LayerNorm.create(dim), MultiHeadAttention.create(rng, dim, heads),
                   LayerNorm.create(dim), FeedForward.create(rng, dim, multiplier, rate))

    def __call__(self, x: Tensor, mask: np.ndarray | None, training: bool = False, rng=None) -> Tensor:
        x = x + self.attention(self.norm_attention(x), mask=mask)
        return x + self.ffn(self.norm_ffn(x), training, rng)


def pad_sequences(sequences: list, pad_id: int = PAD) -> tuple:
    lengths = np.array([len(s) for s in sequences])
    ids = np.full((len(sequences), int(lengths.max())), pad_id, dtype=np.int64)
    for row, sequence in enumerate(sequences):
        ids[row, :len(sequence)] = sequence.ids
    return ids, lengths


@dataclass
class TextEncoder(Component):
    config: TextEncoderConfig
    token_embed: Tensor
    position_embed: Tensor
    blocks: list
    norm: LayerNorm

    @classmethod
    def create(cls, config: TextEncoderConfig, rng: np.random.Generator) -> 'TextEncoder':
        return cls(
            config,
            Tensor(rng.normal(0.0, 0.5, (config.vocab_size, config.dim)), requires_grad=True),
            Tensor(rng.normal(0.0, 0.02, (config.max_length, config.dim)), requires_grad=True),
            [TextBlock.create(rng, config.dim, config.heads, config.ffn_multiplier, config.dropout)
             for _ in range(config.layers)],
            LayerNorm.create(config.dim),
        )

    def __call__(self, sequences: list, training: bool = False, rng=None) -> Embedding:
        if not sequences or any(len(s) == 0 for s in sequences):
            raise ShapeError('text encoder needs at least one token per sequence')
        longest = max(len(s) for s in sequences)
        if longest > self.config.max_length:
            raise ShapeError(f'sequence of length {longest} exceeds max length {self.config.max_length}')
        if max(max(s.ids) for s in sequences) >= self.config.vocab_size:
            raise ShapeError(f'token id out of range for vocabulary of {self.config.vocab_size}')
        ids, lengths = pad_sequences(sequences)
        x = self.token_embed[ids] + self.position_embed[:ids.shape[1]]
        mask = key_padding_mask(lengths, ids.shape[1])
        for block in self.blocks:
            x = block(x, mask, training, rng)
        x = self.norm(x)
        return Embedding(x[:, 0], x, lengths)


def encode_text(sequence: TokenSequence, encoder: TextEncoder) -> Embedding:
    embedding = encoder([sequence])
    return Embedding(embedding.cls[0], embedding.tokens[0])


@dataclass
class ProjectionHead(Component):
    video_projection: Linear
    text_projection: Linear
    log_tau: Tensor
    normalize: bool = True

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, projection_dim: int = 16, normalize: bool = True) -> 'ProjectionHead':
        return cls(Linear.create(rng, dim, projection_dim), Linear.create(rng, dim, projection_dim),
                   Tensor(np.log(TEMPERATURE_INIT), requires_grad=True), normalize)

    @property
    def tau(self) -> Tensor:
        return self.log_tau.exp()


def similarity_matrix(video_cls: Tensor, text_cls: Tensor, head: ProjectionHead) -> Tensor:
    """(B, d) x (B', d) -> (B, B') cosine similarities of the projected embeddings."""
    video = head.video_projection(video_cls)
    text = head.text_projection(text_cls)
    if head.normalize:
        video, text = l2_normalize(video), l2_normalize(text)
    return video @ text.swapaxes(-1, -2)


def similarity(v_cls: Tensor, t_cls: Tensor, head: ProjectionHead) -> Tensor:
    return similarity_matrix(v_cls.reshape(1, -1), t_cls.reshape(1, -1), head).reshape(())


# checkpoints

def store_checkpoint(path: Path, header: dict, params: dict) -> None:
    manifest = [{'name': name, 'shape': list(param.shape)} for name, param in params.items()]
    head = json.dumps({**header, 'parameters': manifest}, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(head + b'\n')
        for param in params.values():
            f.write(np.ascontiguousarray(param.data, dtype='<f8').tobytes())


def load_checkpoint(path: Path) -> tuple:
    raw = Path(path).read_bytes()
    newline = raw.find(b'\n')
    if newline < 0:
        raise FormatError(f'checkpoint {path} has no header line', len(raw))
    try:
        header = json.loads(raw[:newline])
    except ValueError as e:
        raise FormatError(f'checkpoint {path} has a malformed header: {e}', 0) from e
    offset = newline + 1
    arrays = {}
    for entry in header.get('parameters', []):
        count = int(np.prod(entry['shape'], dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise FormatError(f'truncated parameter {entry["name"]} in {path}', len(raw))
        arrays[entry['name']] = np.frombuffer(raw, dtype='<f8', count=count, offset=offset).reshape(entry['shape']).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise FormatError(f'trailing bytes in checkpoint {path}', offset)
    return header, arrays


def config_dict(config) -> dict:
    return asdict(config)

"""
QA reasoner: unimodal towers, text-to-video fusion, answer classifier,
heuristic classifier heads and the question-conditioned gate.
"""
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoders import (Embedding, TextEncoder, TextEncoderConfig, VideoEncoder, VideoEncoderConfig,
                       load_checkpoint, store_checkpoint)
from .errors import ArgumentError, ConfigurationError, FormatError, ShapeError
from .layers import Component, FeedForward, LayerNorm, Linear, MultiHeadAttention, key_padding_mask
from .substrate import Tensor, concat, dropout, log_softmax, soft_cross_entropy, softmax
from .textproc import PromptSet, Vocabulary, convert_mc_batch, convert_oe

logger = logging.getLogger(__name__)

QA_MODES = ('mc', 'oe')
LOSS_MODES = ('fixed', 'gated', 'none')


@dataclass
class ReasonerConfig:
    fusion_layers: int = 1
    qa_mode: str = 'mc'

    def __post_init__(self) -> None:
        if self.fusion_layers < 1:
            raise ConfigurationError(f'need at least one fusion layer, got {self.fusion_layers}')
        if self.qa_mode not in QA_MODES:
            raise ConfigurationError(f'qa_mode must be one of {QA_MODES}, got {self.qa_mode!r}')


@dataclass
class LossConfig:
    mode: str = 'gated'
    alpha: float = 0.5
    gate_hidden: int = 0
    gate_dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.mode not in LOSS_MODES:
            raise ConfigurationError(f'loss mode must be one of {LOSS_MODES}, got {self.mode!r}')
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f'alpha must lie in [0, 1], got {self.alpha}')
        if not 0.0 <= self.gate_dropout < 1.0:
            raise ConfigurationError(f'gate dropout must lie in [0, 1), got {self.gate_dropout}')


@dataclass
class FusionOutput:
    e_cls: Tensor
    tokens: Tensor


@dataclass
class GateWeight:
    g: Tensor

    @property
    def action(self) -> Tensor:
        return self.g

    @property
    def entity(self) -> Tensor:
        return 1.0 - self.g


@dataclass
class Prediction:
    logits: Tensor
    truth: np.ndarray | int | None = None

    @property
    def index(self) -> np.ndarray | int:
        # np.argmax returns the lowest index among ties
        index = np.argmax(self.logits.data, axis=-1)
        return int(index) if np.ndim(index) == 0 else index


@dataclass
class FusionBlock(Component):
    norm_self: LayerNorm
    self_attention: MultiHeadAttention
    norm_cross: LayerNorm
    cross_attention: MultiHeadAttention
    norm_ffn: LayerNorm
    ffn: FeedForward

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, heads: int, multiplier: int, rate: float) -> 'FusionBlock':
        return cls(LayerNorm.create(dim), MultiHeadAttention.create(rng, dim, heads),
                   LayerNorm.create(dim), MultiHeadAttention.create(rng, dim, heads),
                   LayerNorm.create(dim), FeedForward.create(rng, dim, multiplier, rate))

    def __call__(self, text: Tensor, video: Tensor, mask: np.ndarray | None, training: bool = False, rng=None) -> Tensor:
        text = text + self.self_attention(self.norm_self(text), mask=mask)
        text = text + self.cross_attention(self.norm_cross(text), context=video)
        return text + self.ffn(self.norm_ffn(text), training, rng)


@dataclass
class Gate(Component):
    hidden: Linear
    output: Linear
    rate: float = 0.1

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, hidden: int = 0, rate: float = 0.1) -> 'Gate':
        hidden = hidden or max(1, dim // 2)
        return cls(Linear.create(rng, dim, hidden), Linear.create(rng, hidden, 1, zero=True), rate)

    def __call__(self, t_cls: Tensor, training: bool = False, rng=None) -> Tensor:
        hidden = dropout(self.hidden(t_cls).gelu(), self.rate, rng, training)
        logit = self.output(hidden)
        return logit.reshape(logit.shape[:-1]).sigmoid()


@dataclass
class ReasonerOutput:
    logits: Tensor
    p_action: Tensor
    p_entity: Tensor
    g: Tensor


@dataclass
class Reasoner(Component):
    video_config: VideoEncoderConfig
    text_config: TextEncoderConfig
    config: ReasonerConfig
    video: VideoEncoder
    text: TextEncoder
    fusion: list
    norm: LayerNorm
    action_head: Linear
    entity_head: Linear
    answer_head: Linear
    gate: Gate
    answers: tuple = ()
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, video_config: VideoEncoderConfig, text_config: TextEncoderConfig, config: ReasonerConfig,
               loss_config: LossConfig, num_actions: int, num_entities: int, rng: np.random.Generator,
               answers: tuple = ()) -> 'Reasoner':
        if video_config.dim != text_config.dim:
            raise ConfigurationError(f'video dim {video_config.dim} and text dim {text_config.dim} must agree')
        if num_actions < 1 or num_entities < 1:
            raise ConfigurationError('heuristic heads need at least one action and one entity')
        if config.qa_mode == 'oe' and not answers:
            raise ConfigurationError('open-ended mode needs a non-empty answer vocabulary')
        dim = text_config.dim
        return cls(
            video_config, text_config, config,
            VideoEncoder.create(video_config, rng),
            TextEncoder.create(text_config, rng),
            [FusionBlock.create(rng, dim, text_config.heads, text_config.ffn_multiplier, text_config.dropout)
             for _ in range(config.fusion_layers)],
            LayerNorm.create(dim),
            Linear.create(rng, dim, num_actions),
            Linear.create(rng, dim, num_entities),
            Linear.create(rng, dim, 1 if config.qa_mode == 'mc' else len(answers)),
            Gate.create(rng, dim, loss_config.gate_hidden, loss_config.gate_dropout),
            tuple(answers),
        )

    def check_prompt_sets(self, actions: PromptSet, entities: PromptSet) -> None:
        if (actions.size, entities.size) != (self.action_head.out_features, self.entity_head.out_features):
            raise ConfigurationError(
                f'heuristic heads are sized {self.action_head.out_features} x {self.entity_head.out_features}, '
                f'prompt sets have {actions.size} actions and {entities.size} entities')

    def forward(self, clips: np.ndarray, samples: list, vocabulary: Vocabulary,
                training: bool = False, rng: np.random.Generator | None = None) -> ReasonerOutput:
        """
        Score a batch of samples against their clips (B, C, F, H, W).

        MC batches need the same candidate count for every sample; logits
        are (B, K). OE logits are (B, answers). Heuristic head outputs are
        (B, K, M) and (B, K, N), one distribution per fused sequence.
        """
        batch = len(samples)
        video = self.video(clips, training, rng)
        questions = [convert_oe(s.question, vocabulary) for s in samples]
        question_text = self.text(questions, training, rng)
        g = self.gate(question_text.cls, training, rng)
        if self.config.qa_mode == 'mc':
            counts = {len(s.candidates) for s in samples}
            if len(counts) != 1:
                raise ArgumentError(f'MC batch mixes candidate counts {sorted(counts)}')
            per_sample = counts.pop()
            if per_sample == 0:
                raise ArgumentError('MC sample has no candidates')
            text = self.text([seq for s in samples for seq in convert_mc_batch(s.question, s.candidates, vocabulary)],
                             training, rng)
        else:
            per_sample = 1
            text = question_text
        rows = np.repeat(np.arange(batch), per_sample)
        fused = fuse(Embedding(video.cls[rows], video.tokens[rows]), text, self, training, rng)
        p_action, p_entity = heuristic_heads(fused.e_cls, self)
        logits = self.answer_head(fused.e_cls)
        logits = logits.reshape(batch, per_sample) if self.config.qa_mode == 'mc' else logits
        return ReasonerOutput(
            logits,
            p_action.reshape(batch, per_sample, -1),
            p_entity.reshape(batch, per_sample, -1),
            g,
        )


def fuse(video: Embedding, text: Embedding, reasoner: Reasoner, training: bool = False, rng=None) -> FusionOutput:
    """Text self-attention, text-to-video cross-attention and feed-forward per block; e_cls is fused position 0."""
    video_tokens, text_tokens = video.tokens, text.tokens
    if video_tokens.shape[-1] != text_tokens.shape[-1]:
        raise ShapeError(f'video dim {video_tokens.shape[-1]} does not match text dim {text_tokens.shape[-1]}')
    single = text_tokens.ndim == 2
    if single:
        video_tokens = video_tokens.reshape(1, *video_tokens.shape)
        text_tokens = text_tokens.reshape(1, *text_tokens.shape)
    mask = None if text.lengths is None else key_padding_mask(text.lengths, text_tokens.shape[1])
    x = text_tokens
    for block in reasoner.fusion:
        x = block(x, video_tokens, mask, training, rng)
    x = reasoner.norm(x)
    tokens = concat([x, video_tokens], axis=1)
    if single:
        return FusionOutput(x[0, 0], tokens[0])
    return FusionOutput(x[:, 0], tokens)


def heuristic_heads(e_cls: Tensor, reasoner: Reasoner, prompt_sets: tuple | None = None) -> tuple:
    if prompt_sets is not None:
        reasoner.check_prompt_sets(*prompt_sets)
    return softmax(reasoner.action_head(e_cls), axis=-1), softmax(reasoner.entity_head(e_cls), axis=-1)


def _target_array(target) -> np.ndarray | None:
    if target is None:
        return None
    return np.asarray(getattr(target, 'scores', target), dtype=np.float64)


def heuristic_loss(predicted: Tensor, target, mask=None, per_sample: bool = False) -> Tensor:
    """
    Soft cross entropy of predicted against target. The target broadcasts
    against predicted, so (B, 1, M) targets serve (B, K, M) predictions.
    Rows with mask 0 contribute exactly zero and a None target (a filtered
    heuristic) yields 0. per_sample keeps the leading axis.
    """
    target = _target_array(target)
    if target is None:
        return Tensor(0.0)
    if target.shape[-1] != predicted.shape[-1]:
        raise ShapeError(f'heuristic of length {target.shape[-1]} against {predicted.shape[-1]} predictions')
    losses = soft_cross_entropy(np.broadcast_to(target, predicted.shape), predicted)
    if losses.ndim == 0:
        return losses
    if losses.ndim > 1:
        losses = losses.mean(axis=tuple(range(1, losses.ndim)))
    if mask is not None:
        losses = losses * np.asarray(mask, dtype=np.float64)
    return losses if per_sample else losses.mean()


def tam_loss(p_action: Tensor, h_action, mask=None, per_sample: bool = False) -> Tensor:
    return heuristic_loss(p_action, h_action, mask, per_sample)


def sem_loss(p_entity: Tensor, h_entity, mask=None, per_sample: bool = False) -> Tensor:
    return heuristic_loss(p_entity, h_entity, mask, per_sample)


def predict(e_cls: Tensor, mode: str, reasoner: Reasoner, truth: int | None = None) -> Prediction:
    """MC takes one e_cls per candidate (K, d); OE takes a single e_cls (d,)."""
    match mode:
        case 'mc':
            if e_cls.ndim != 2 or e_cls.shape[0] == 0:
                raise ArgumentError('MC prediction needs at least one candidate')
            logits = reasoner.answer_head(e_cls).reshape(e_cls.shape[0])
        case 'oe':
            logits = reasoner.answer_head(e_cls)
        case _:
            raise ArgumentError(f'mode must be one of {QA_MODES}, got {mode!r}')
    return Prediction(logits, truth)


def pred_loss(prediction: Prediction, per_sample: bool = False) -> Tensor:
    """Cross entropy of softmax(logits) against the one-hot truth; batched rows are averaged unless per_sample."""
    logits = prediction.logits
    size = logits.shape[-1]
    if prediction.truth is None:
        raise ArgumentError('prediction has no ground truth')
    truth = np.asarray(prediction.truth)
    if np.any(truth < 0) or np.any(truth >= size):
        raise ArgumentError(f'ground truth {prediction.truth} is out of range for {size} answers')
    log_probs = log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        return -log_probs[int(truth)]
    losses = -log_probs[np.arange(logits.shape[0]), truth]
    return losses if per_sample else losses.mean()


def gate(t_cls: Tensor, gate_params: Gate, training: bool = False, rng=None) -> GateWeight:
    return GateWeight(gate_params(t_cls, training, rng))


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def total_loss(pred, tam, sem, config: LossConfig, g=None) -> Tensor:
    """
    fixed: pred + a * tam + (1 - a) * sem; gated: the same with a = g;
    none: pred alone. Vector inputs are per-sample terms and are averaged
    after weighting.
    """
    pred, tam, sem = _lift(pred), _lift(tam), _lift(sem)
    match config.mode:
        case 'none':
            loss = pred
        case 'fixed':
            loss = pred + config.alpha * tam + (1.0 - config.alpha) * sem
        case _:
            if g is None:
                raise ArgumentError('gated loss needs the gate weight g')
            g = g.g if isinstance(g, GateWeight) else _lift(g)
            loss = pred + g * tam + (1.0 - g) * sem
    return loss.mean() if loss.ndim else loss


# checkpoints

def store_reasoner(reasoner: Reasoner, path: Path, loss_config: LossConfig) -> None:
    header = {
        'component': 'reasoner',
        'video': asdict(reasoner.video_config),
        'text': asdict(reasoner.text_config),
        'reasoner': asdict(reasoner.config),
        'loss': asdict(loss_config),
        'num_actions': reasoner.action_head.out_features,
        'num_entities': reasoner.entity_head.out_features,
        'answers': list(reasoner.answers),
        'meta': reasoner.meta,
    }
    store_checkpoint(path, header, reasoner.named_parameters())


def load_reasoner(path: Path) -> tuple:
    header, arrays = load_checkpoint(path)
    if header.get('component') != 'reasoner':
        raise FormatError(f'{path} is not a reasoner checkpoint')
    loss_config = LossConfig(**header['loss'])
    reasoner = Reasoner.create(
        VideoEncoderConfig(**header['video']), TextEncoderConfig(**header['text']),
        ReasonerConfig(**header['reasoner']), loss_config,
        header['num_actions'], header['num_entities'], np.random.default_rng(0), tuple(header['answers']))
    reasoner.load_arrays(arrays)
    reasoner.meta = header.get('meta', {})
    return reasoner, loss_config


def answer_truth(samples: list, reasoner: Reasoner) -> np.ndarray:
    """Ground-truth indices: candidate position (MC) or answer-vocabulary index, -1 when unseen (OE)."""
    if reasoner.config.qa_mode == 'mc':
        return np.array([s.answer_index for s in samples])
    lookup = {answer: i for i, answer in enumerate(reasoner.answers)}
    return np.array([lookup.get(s.answer, -1) for s in samples])


def answer_vocabulary(samples: list) -> tuple:
    return tuple(sorted({s.answer for s in samples}))

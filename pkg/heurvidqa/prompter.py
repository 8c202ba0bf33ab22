"""
Entity/action prompter: a dual video-text encoder trained contrastively, then
frozen and used to score prompt sets against temporal and spatial crops.
"""
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from .encoders import (ProjectionHead, TextEncoder, TextEncoderConfig, VideoEncoder, VideoEncoderConfig,
                       load_checkpoint, similarity_matrix, store_checkpoint)
from .errors import ArgumentError, DataError, FormatError, ShapeError, StateError
from .layers import Component
from .parallel import map_in_order
from .substrate import Tensor, check_distribution, l2_normalize, log_softmax, softmax
from .textproc import PromptSet, Vocabulary, convert_oe, instantiate_templates, templates_for
from .videoproc import CropConfig, QADataset, VideoTensor, prepare_crops

logger = logging.getLogger(__name__)

BRANCHES = ('action', 'entity')
CROP_MODES = {'action': 'temporal', 'entity': 'spatial'}
DEFAULT_THRESHOLD = 0.1
TOP_K = 5


@dataclass
class PrompterConfig:
    projection_dim: int = 16
    normalize: bool = True
    share_video_encoder: bool = False


@dataclass
class PrompterBranch(Component):
    video: VideoEncoder
    head: ProjectionHead


@dataclass
class Prompter(Component):
    video_config: VideoEncoderConfig
    text_config: TextEncoderConfig
    config: PrompterConfig
    action: PrompterBranch
    entity: PrompterBranch
    text: TextEncoder
    frozen: bool = False
    _prompt_cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, video_config: VideoEncoderConfig, text_config: TextEncoderConfig,
               config: PrompterConfig, rng: np.random.Generator) -> 'Prompter':
        text = TextEncoder.create(text_config, rng)
        action_video = VideoEncoder.create(video_config, rng)
        entity_video = action_video if config.share_video_encoder else VideoEncoder.create(video_config, rng)
        heads = [ProjectionHead.create(rng, video_config.dim, config.projection_dim, config.normalize) for _ in BRANCHES]
        return cls(video_config, text_config, config,
                   PrompterBranch(action_video, heads[0]), PrompterBranch(entity_video, heads[1]), text)

    def branch(self, kind: str) -> PrompterBranch:
        match kind:
            case 'action':
                return self.action
            case 'entity':
                return self.entity
        raise ArgumentError(f'branch must be one of {BRANCHES}, got {kind!r}')

    def trainable(self, kind: str) -> dict:
        """Parameters updated by a pretraining step on one branch."""
        owned = {id(p) for part in (self.branch(kind), self.text) for p in part.named_parameters().values()}
        return {name: p for name, p in self.named_parameters().items() if id(p) in owned}

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, param in self.named_parameters().items():
            digest.update(name.encode('utf-8'))
            digest.update(np.ascontiguousarray(param.data, dtype='<f8').tobytes())
        return digest.hexdigest()

    def freeze(self) -> None:
        self.frozen = True
        self.set_requires_grad(False)
        self._prompt_cache.clear()

    def require_frozen(self) -> None:
        if not self.frozen:
            raise StateError('prompter not frozen')

    def prompt_embeddings(self, prompts: PromptSet, vocabulary: Vocabulary) -> np.ndarray:
        """Projected text embeddings for every template instantiation, in PromptSet.flattened() order."""
        key = (prompts.kind, prompts.variants)
        if key not in self._prompt_cache:
            sequences = [convert_oe(prompt, vocabulary) for _, prompt in prompts.flattened()]
            text_cls = self.text(sequences).cls
            self._prompt_cache[key] = _project(self.branch(prompts.kind).head, text_cls, 'text')
        return self._prompt_cache[key]

    def crop_embeddings(self, video: VideoTensor, kind: str, crop_config: CropConfig, seed) -> np.ndarray:
        crops = prepare_crops(video, CROP_MODES[kind], crop_config, seed, masked=crop_config.mask_at_inference)
        branch = self.branch(kind)
        video_cls = branch.video([crop for crop, _ in crops]).cls
        return _project(branch.head, video_cls, 'video')

    def tau(self, kind: str) -> float:
        return float(np.exp(self.branch(kind).head.log_tau.data))


def _project(head: ProjectionHead, cls: Tensor, modality: str) -> np.ndarray:
    projection = head.video_projection if modality == 'video' else head.text_projection
    projected = projection(cls)
    if head.normalize:
        projected = l2_normalize(projected)
    return np.array(projected.data)


# contrastive pretraining

def _row_term(logits: Tensor) -> Tensor:
    diagonal = np.arange(logits.shape[0])
    return -log_softmax(logits, axis=-1)[diagonal, diagonal].sum()


def contrastive_terms(similarities, tau) -> tuple:
    """(L_v2t, L_t2v) for a B x B similarity matrix whose diagonal holds the positive pairs."""
    similarities = similarities if isinstance(similarities, Tensor) else Tensor(similarities)
    if similarities.ndim != 2 or similarities.shape[0] != similarities.shape[1]:
        raise ShapeError(f'similarity matrix must be square, got shape {list(similarities.shape)}')
    if similarities.shape[0] < 2:
        raise ArgumentError('contrastive loss needs a batch of at least 2 pairs')
    logits = similarities / tau
    return _row_term(logits), _row_term(logits.transpose())


def vtc_loss(video_cls: Tensor, text_cls: Tensor, head: ProjectionHead) -> Tensor:
    if video_cls.shape[0] < 2:
        raise ArgumentError('contrastive loss needs a batch of at least 2 pairs')
    v2t, t2v = contrastive_terms(similarity_matrix(video_cls, text_cls, head), head.tau)
    return (v2t + t2v) / 2.0


def caption_for(prompts: PromptSet, word: str) -> str:
    if word in prompts.words:
        return prompts.prompts[prompts.words.index(word)]
    return instantiate_templates([word], prompts.kind, templates_for(prompts.kind)).prompts[0]


def pretrain_step(batch: list, prompter: Prompter, optimizer, branch: str, vocabulary: Vocabulary,
                  rng: np.random.Generator | None = None) -> float:
    """One optimizer step of one branch on (VideoTensor, caption) pairs; returns the batch loss."""
    if prompter.frozen:
        raise StateError('cannot pretrain a frozen prompter')
    videos, captions = zip(*batch)
    encoder = prompter.branch(branch)
    video_cls = encoder.video(list(videos), training=True, rng=rng).cls
    text_cls = prompter.text([convert_oe(c, vocabulary) for c in captions], training=True, rng=rng).cls
    loss = vtc_loss(video_cls, text_cls, encoder.head)
    params = prompter.trainable(branch)
    tape = loss.backward()
    optimizer.step(params, {name: tape.grad(param) for name, param in params.items()})
    prompter._prompt_cache.clear()
    return loss.item()


# heuristics

@dataclass(frozen=True, eq=False)
class HeuristicDistribution:
    kind: str
    scores: np.ndarray
    video_id: str = ''
    crop_count: int = 0
    words: tuple = ()

    def __post_init__(self) -> None:
        check_distribution(self.scores, f'{self.kind} heuristic')
        if self.words and len(self.words) != len(self.scores):
            raise ShapeError(f'{len(self.words)} words for {len(self.scores)} scores')

    @property
    def max_score(self) -> float:
        return float(self.scores.max())

    def top(self, k: int = TOP_K) -> list:
        order = np.argsort(-self.scores, kind='stable')[:k]
        return [(self.words[i] if self.words else str(i), float(self.scores[i])) for i in order]


def word_similarities(crop_vectors: np.ndarray, prompt_vectors: np.ndarray, prompts: PromptSet) -> np.ndarray:
    """(crops, words) similarities, averaged over the templates of each word."""
    groups = np.array([index for index, _ in prompts.flattened()])
    membership = np.zeros((len(groups), prompts.size))
    membership[np.arange(len(groups)), groups] = 1.0
    return (crop_vectors @ prompt_vectors.T) @ membership / membership.sum(axis=0)


def heuristic_scores(similarities: np.ndarray, tau: float) -> np.ndarray:
    """Mean over crops of the per-crop temperature softmax."""
    return softmax(Tensor(similarities), temperature=tau, axis=-1).data.mean(axis=0)


def _heuristics(kind: str, video: VideoTensor, prompts: PromptSet, prompter: Prompter, crop_config: CropConfig,
                vocabulary: Vocabulary, seed, video_id: str) -> HeuristicDistribution:
    prompter.require_frozen()
    if prompts.kind != kind:
        raise ArgumentError(f'expected {kind} prompts, got {prompts.kind}')
    if prompts.size == 0:
        raise ArgumentError(f'{kind} prompt set is empty')
    prompt_vectors = prompter.prompt_embeddings(prompts, vocabulary)
    crop_vectors = prompter.crop_embeddings(video, kind, crop_config, seed)
    scores = heuristic_scores(word_similarities(crop_vectors, prompt_vectors, prompts), prompter.tau(kind))
    return HeuristicDistribution(kind, scores, video_id, len(crop_vectors), prompts.words)


def action_heuristics(video: VideoTensor, prompts: PromptSet, prompter: Prompter, crop_config: CropConfig,
                      vocabulary: Vocabulary, seed=0, video_id: str = '') -> HeuristicDistribution:
    return _heuristics('action', video, prompts, prompter, crop_config, vocabulary, seed, video_id)


def entity_heuristics(video: VideoTensor, prompts: PromptSet, prompter: Prompter, crop_config: CropConfig,
                      vocabulary: Vocabulary, seed=0, video_id: str = '') -> HeuristicDistribution:
    return _heuristics('entity', video, prompts, prompter, crop_config, vocabulary, seed, video_id)


def filter_heuristic(dist: HeuristicDistribution, threshold: float = DEFAULT_THRESHOLD) -> HeuristicDistribution | None:
    return dist if dist.max_score >= threshold else None


def heuristic_record(dist: HeuristicDistribution, threshold: float = DEFAULT_THRESHOLD, top_k: int = TOP_K) -> dict:
    return {
        'video_id': dist.video_id,
        'kind': dist.kind,
        'scores': [float(s) for s in dist.scores],
        'words': list(dist.words),
        'top': [{'word': word, 'score': score} for word, score in dist.top(top_k)],
        'kept': filter_heuristic(dist, threshold) is not None,
    }


def generate_heuristic_store(dataset: QADataset, prompt_sets: dict, prompter: Prompter, vocabulary: Vocabulary,
                             crop_config: CropConfig, seed: int = 0, threshold: float = DEFAULT_THRESHOLD,
                             top_k: int = TOP_K, parallel: bool = True, progress: bool = False) -> list:
    """Store records for every (video, kind), in dataset video order with action before entity."""
    prompter.require_frozen()
    start_time = time.time()
    for kind in BRANCHES:
        prompter.prompt_embeddings(prompt_sets[kind], vocabulary)
    generators = {'action': action_heuristics, 'entity': entity_heuristics}

    with tqdm(total=len(dataset.video_ids), desc='gen-heuristics', disable=not progress) as bar:
        def build(item: tuple) -> list:
            index, video_id = item
            video = dataset.videos[video_id]
            group = [
                heuristic_record(
                    generators[kind](video, prompt_sets[kind], prompter, crop_config, vocabulary,
                                     [seed, index, k], video_id),
                    threshold, top_k)
                for k, kind in enumerate(BRANCHES)
            ]
            bar.update()
            return group

        groups = map_in_order(build, enumerate(dataset.video_ids), parallel=parallel)
    records = [r for group in groups for r in group]
    duration = time.time() - start_time
    kept = sum(r['kept'] for r in records)
    logger.info(f'Heuristics for {len(dataset.video_ids)} videos took {duration:.2} seconds '
                f'({kept} of {len(records)} kept at threshold {threshold})')
    return records


def store_heuristics(records: list, path: Path) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(record) + '\n')


@dataclass
class HeuristicStore:
    records: dict

    @property
    def video_ids(self) -> list:
        return list(dict.fromkeys(video_id for video_id, _ in self.records))

    def __contains__(self, video_id: str) -> bool:
        return all((video_id, kind) in self.records for kind in BRANCHES)

    def entries(self, video_id: str) -> list:
        if video_id not in self.video_ids:
            raise DataError(f'video {video_id!r} is not in the heuristic store')
        return [self.records[(video_id, kind)] for kind in BRANCHES if (video_id, kind) in self.records]

    def target(self, video_id: str, kind: str) -> np.ndarray | None:
        """Kept scores for (video, kind), or None when missing or discarded."""
        record = self.records.get((video_id, kind))
        if record is None or not record['kept']:
            return None
        return np.array(record['scores'], dtype=np.float64)


def load_heuristics(path: Path) -> HeuristicStore:
    records = {}
    offset = 0
    with open(path, 'rb') as f:
        for line_number, line in enumerate(f):
            if line.strip():
                try:
                    record = json.loads(line)
                    key = (record['video_id'], record['kind'])
                    check_distribution(np.array(record['scores'], dtype=np.float64), f'heuristic {key}')
                    record['kept'] = bool(record['kept'])
                    records[key] = record
                except (KeyError, ValueError, TypeError) as e:
                    raise FormatError(f'bad heuristic record on line {line_number + 1} of {path}: {e}', offset) from e
            offset += len(line)
    return HeuristicStore(records)


# checkpoints

def store_prompter(prompter: Prompter, path: Path) -> None:
    header = {
        'component': 'prompter',
        'video': asdict(prompter.video_config),
        'text': asdict(prompter.text_config),
        'prompter': asdict(prompter.config),
        'frozen': prompter.frozen,
    }
    store_checkpoint(path, header, prompter.named_parameters())


def load_prompter(path: Path) -> Prompter:
    header, arrays = load_checkpoint(path)
    if header.get('component') != 'prompter':
        raise FormatError(f'{path} is not a prompter checkpoint')
    prompter = Prompter.create(VideoEncoderConfig(**header['video']), TextEncoderConfig(**header['text']),
                               PrompterConfig(**header['prompter']), np.random.default_rng(0))
    prompter.load_arrays(arrays)
    if header.get('frozen'):
        prompter.freeze()
    return prompter

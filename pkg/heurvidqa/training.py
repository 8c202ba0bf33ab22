"""
Optimizer, learning-rate schedule and the training drivers.

Every stochastic choice of a run comes from `split_rngs(seed)`, so a
(config, seed) pair fixes every logged loss value.
"""
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from tqdm import tqdm

from .config import RunConfig
from .encoders import (Embedding, ProjectionHead, TextEncoder, TextEncoderConfig, VideoEncoderConfig, encode_text,
                       similarity)
from .errors import ArgumentError, DataError, ShapeError, StateError
from .prompter import BRANCHES, CROP_MODES, HeuristicStore, Prompter, caption_for, pretrain_step, vtc_loss
from .reasoner import (LossConfig, Prediction, Reasoner, ReasonerConfig, answer_truth, answer_vocabulary, fuse,
                       pred_loss, sem_loss, tam_loss, total_loss)
from .substrate import Tensor, grad_check, soft_cross_entropy, softmax
from .textproc import CLS, QASample, TokenSequence, Vocabulary, build_vocabulary, tokenize
from .videoproc import CropConfig, QADataset, VideoTensor, prepare_crops, resize_video, sample_frames

logger = logging.getLogger(__name__)

RNG_PURPOSES = ('init', 'shuffle', 'dropout', 'crops', 'split')
LOSS_COLUMNS = ['step', 'lr', 'loss', 'loss_pred', 'loss_tam', 'loss_sem', 'gate_mean']
ABLATION_SETTINGS = {
    'none': LossConfig(mode='none'),
    'entity-only': LossConfig(mode='fixed', alpha=0.0),
    'action-only': LossConfig(mode='fixed', alpha=1.0),
    'fixed': LossConfig(mode='fixed', alpha=0.5),
    'gated': LossConfig(mode='gated'),
}


def split_rngs(seed: int) -> dict:
    """One generator per purpose, spawned from a single seed sequence."""
    children = np.random.SeedSequence(seed).spawn(len(RNG_PURPOSES))
    return {purpose: np.random.default_rng(child) for purpose, child in zip(RNG_PURPOSES, children)}


# optimization

@dataclass
class OptimizerState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.001
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState) -> dict:
    """Decoupled weight decay Adam; parameters that do not require grad are left untouched."""
    state.step += 1
    t = state.step
    for name, param in params.items():
        if not param.requires_grad:
            continue
        if name not in grads:
            raise ArgumentError(f'no gradient for parameter {name}')
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != param.shape:
            raise ShapeError(f'gradient for {name} has shape {list(grad.shape)}, parameter has {list(param.shape)}')
        m = state.beta1 * state.first.get(name, np.zeros_like(grad)) + (1 - state.beta1) * grad
        v = state.beta2 * state.second.get(name, np.zeros_like(grad)) + (1 - state.beta2) * grad * grad
        state.first[name], state.second[name] = m, v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        param.data = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps) - state.lr * state.weight_decay * param.data
    return params


def clip_grad_norm(grads: dict, max_norm: float) -> tuple:
    """Scale all gradients together so their global L2 norm is at most max_norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


@dataclass
class AdamW:
    state: OptimizerState
    max_grad_norm: float | None = 1.0
    last_norm: float = 0.0

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self, params: dict, grads: dict) -> None:
        live = {name: param for name, param in params.items() if param.requires_grad}
        grads = {name: grads[name] for name in live}
        if self.max_grad_norm:
            grads, self.last_norm = clip_grad_norm(grads, self.max_grad_norm)
        adamw_step(live, grads, self.state)


@dataclass
class Schedule:
    base_lr: float = 5e-5
    total_steps: int = 1

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ArgumentError(f'schedule needs at least one step, got {self.total_steps}')

    def lr_at(self, step: int) -> float:
        return lr_at(step, self)


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear decay from base_lr at step 0 to 0 at total_steps; later steps get 0 and a warning."""
    if step < 0:
        raise ArgumentError(f'step must be non-negative, got {step}')
    if step > schedule.total_steps:
        logger.warning(f'step {step} is past the schedule end {schedule.total_steps}; using lr 0')
        return 0.0
    return schedule.base_lr * (1 - step / schedule.total_steps)


def _optimizer(config: RunConfig, total_steps: int) -> tuple:
    state = OptimizerState(lr=config.train.lr, weight_decay=config.train.weight_decay)
    return AdamW(state, config.train.max_grad_norm), Schedule(config.train.lr, total_steps)


def _batches(order: np.ndarray, batch_size: int) -> list:
    """Chunks of order; a trailing single item joins the previous chunk."""
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def sized_text_config(config: RunConfig, vocabulary: Vocabulary):
    return replace(config.text, vocab_size=len(vocabulary))


# prompter pretraining

@dataclass
class PretrainResult:
    prompter: Prompter
    losses: pd.DataFrame


def run_pretrain(config: RunConfig, dataset: QADataset, prompt_sets: dict, vocabulary: Vocabulary,
                 epochs: int | None = None, seed: int | None = None) -> PretrainResult:
    """
    Alternate action-branch steps (temporal crops, action captions) and
    entity-branch steps (spatial crops, entity captions) over shuffled
    batches of videos. Crops are masked as in pretraining augmentation.
    """
    epochs = config.train.pretrain_epochs if epochs is None else epochs
    seed = config.seed if seed is None else seed
    video_ids = dataset.video_ids
    if len(video_ids) < 2:
        raise ArgumentError(f'pretraining needs at least 2 videos, got {len(video_ids)}')
    start_time = time.time()
    rngs = split_rngs(seed)
    prompter = Prompter.create(config.video, sized_text_config(config, vocabulary), config.prompter, rngs['init'])
    labels = dataset.labels()
    crop_config = replace(config.crops, temporal_crops=1, spatial_crops=1)
    crop_base = int(rngs['crops'].integers(2 ** 31))
    steps_per_epoch = len(_batches(np.arange(len(video_ids)), config.train.batch_size)) * len(BRANCHES)
    optimizer, schedule = _optimizer(config, epochs * steps_per_epoch)

    rows = []
    step = 0
    with tqdm(total=epochs * steps_per_epoch, desc='pretrain', disable=not config.train.progress) as progress:
        for epoch in range(epochs):
            for batch in _batches(rngs['shuffle'].permutation(len(video_ids)), config.train.batch_size):
                for k, kind in enumerate(BRANCHES):
                    optimizer.lr = schedule.lr_at(step)
                    pairs = []
                    for i in batch:
                        video_id = video_ids[i]
                        crop, _ = prepare_crops(dataset.videos[video_id], CROP_MODES[kind], crop_config,
                                                [crop_base, epoch, int(i), k], masked=True)[0]
                        entity, action = labels[video_id]
                        pairs.append((crop, caption_for(prompt_sets[kind], action if kind == 'action' else entity)))
                    loss = pretrain_step(pairs, prompter, optimizer, kind, vocabulary, rngs['dropout'])
                    rows.append({'step': step, 'epoch': epoch, 'branch': kind, 'lr': optimizer.lr, 'loss': loss})
                    step += 1
                    progress.update()
                    progress.set_postfix(loss=f'{loss:.4f}')
    duration = time.time() - start_time
    logger.info(f'Prompter pretraining ({step} steps) took {duration:.2} seconds')
    return PretrainResult(prompter, pd.DataFrame(rows))


# QA training

def split_videos(video_ids: list, holdout_fraction: float, seed: int) -> tuple:
    """(train ids, held-out ids), both in sorted order."""
    ids = sorted(video_ids)
    held = int(round(holdout_fraction * len(ids)))
    if holdout_fraction > 0 and len(ids) >= 2:
        held = min(max(held, 1), len(ids) - 1)
    order = split_rngs(seed)['split'].permutation(len(ids))
    heldout = sorted(ids[i] for i in order[:held])
    return sorted(set(ids) - set(heldout)), heldout


def qa_clip(video: VideoTensor, crop_config: CropConfig, seed) -> np.ndarray:
    clip = sample_frames(video, min(crop_config.num_frames, video.frames), seed)
    if crop_config.resize_hw is not None:
        clip = resize_video(clip, crop_config.resize_hw)
    return clip.payload.astype(np.float64)


def prepare_clips(dataset: QADataset, crop_config: CropConfig, seed: int) -> dict:
    """Full-frame sparse samples per video, seeded by the video's sorted position."""
    base = int(split_rngs(seed)['crops'].integers(2 ** 31))
    return {video_id: qa_clip(dataset.videos[video_id], crop_config, [base, i])
            for i, video_id in enumerate(sorted(dataset.video_ids))}


def _qa_batches(samples: list, batch_size: int, rng: np.random.Generator) -> list:
    """Shuffled batches of sample indices; every batch shares one candidate count."""
    order = rng.permutation(len(samples))
    groups = {}
    for i in order:
        groups.setdefault(len(samples[i].candidates), []).append(i)
    batches = [chunk for key in sorted(groups) for chunk in _batches(np.array(groups[key]), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def heuristic_targets(samples: list, heuristics, kind: str, size: int) -> tuple:
    """(B, 1, size) targets and (B,) mask; missing or discarded heuristics get a uniform placeholder and mask 0."""
    targets = np.full((len(samples), 1, size), 1.0 / size)
    mask = np.zeros(len(samples))
    if heuristics is None:
        return targets, mask
    for row, sample in enumerate(samples):
        target = heuristics.target(sample.video_id, kind)
        if target is None:
            continue
        if len(target) != size:
            raise DataError(f'{kind} heuristic for {sample.video_id} has {len(target)} scores, model expects {size}')
        targets[row, 0] = target
        mask[row] = 1.0
    return targets, mask


def check_coverage(video_ids: list, heuristics, max_missing_fraction: float) -> float:
    missing = [v for v in video_ids if heuristics is None or v not in heuristics]
    fraction = len(missing) / max(len(video_ids), 1)
    if fraction > max_missing_fraction:
        raise DataError(f'{len(missing)} of {len(video_ids)} training videos have no heuristics '
                        f'({fraction:.2f} > {max_missing_fraction:.2f})')
    if missing:
        logger.warning(f'{len(missing)} training videos have no heuristics and train without TAM/SEM terms')
    return fraction


def qa_step_losses(reasoner: Reasoner, clips: np.ndarray, samples: list, vocabulary: Vocabulary, heuristics,
                   loss_config: LossConfig, training: bool = False, rng=None) -> dict:
    """Forward one batch and return the total loss tensor plus its logged parts."""
    out = reasoner.forward(clips, samples, vocabulary, training, rng)
    pred = pred_loss(Prediction(out.logits, answer_truth(samples, reasoner)), per_sample=True)
    action_targets, action_mask = heuristic_targets(samples, heuristics, 'action', reasoner.action_head.out_features)
    entity_targets, entity_mask = heuristic_targets(samples, heuristics, 'entity', reasoner.entity_head.out_features)
    tam = tam_loss(out.p_action, action_targets, action_mask, per_sample=True)
    sem = sem_loss(out.p_entity, entity_targets, entity_mask, per_sample=True)
    return {
        'loss': total_loss(pred, tam, sem, loss_config, out.g),
        'loss_pred': float(pred.data.mean()),
        'loss_tam': float(tam.data.mean()),
        'loss_sem': float(sem.data.mean()),
        'gate_mean': float(out.g.data.mean()),
    }


@dataclass
class QAResult:
    reasoner: Reasoner
    report: dict
    train_report: dict
    losses: pd.DataFrame
    predictions: pd.DataFrame


def run_train_qa(config: RunConfig, dataset: QADataset, heuristics, prompt_sizes: tuple, vocabulary: Vocabulary,
                 prompter: Prompter | None = None, epochs: int | None = None, seed: int | None = None) -> QAResult:
    """
    Train the reasoner on the non-held-out videos and evaluate on the rest.
    Only the offline heuristic store is read; a prompter passed in is checked
    to be unchanged by the run.
    """
    epochs = config.train.epochs if epochs is None else epochs
    seed = config.seed if seed is None else seed
    if not dataset.samples:
        raise ArgumentError('QA training needs a non-empty dataset')
    start_time = time.time()
    checksum = prompter.checksum() if prompter is not None else None
    train_ids, heldout_ids = split_videos(dataset.video_ids, config.train.holdout_fraction, seed)
    if config.loss.mode != 'none':
        check_coverage(train_ids, heuristics, config.train.max_missing_fraction)
    train_set = set(train_ids)
    train_samples = [s for s in dataset.samples if s.video_id in train_set]
    heldout_samples = [s for s in dataset.samples if s.video_id not in train_set]

    rngs = split_rngs(seed)
    answers = answer_vocabulary(train_samples) if config.model.qa_mode == 'oe' else ()
    reasoner = Reasoner.create(config.video, sized_text_config(config, vocabulary), config.model, config.loss,
                               prompt_sizes[0], prompt_sizes[1], rngs['init'], answers)
    reasoner.meta = {'train_videos': train_ids, 'heldout_videos': heldout_ids, 'seed': seed}
    clips = prepare_clips(dataset, config.crops, seed)
    params = reasoner.named_parameters()
    steps_per_epoch = len(_qa_batches(train_samples, config.train.batch_size, np.random.default_rng(0)))
    optimizer, schedule = _optimizer(config, epochs * steps_per_epoch)

    rows = []
    step = 0
    with tqdm(total=epochs * steps_per_epoch, desc='train-qa', disable=not config.train.progress) as progress:
        for _ in range(epochs):
            for batch in _qa_batches(train_samples, config.train.batch_size, rngs['shuffle']):
                samples = [train_samples[i] for i in batch]
                optimizer.lr = schedule.lr_at(step)
                parts = qa_step_losses(reasoner, np.stack([clips[s.video_id] for s in samples]), samples, vocabulary,
                                       heuristics, config.loss, training=True, rng=rngs['dropout'])
                loss = parts.pop('loss')
                tape = loss.backward()
                optimizer.step(params, {name: tape.grad(param) for name, param in params.items()})
                rows.append({'step': step, 'lr': optimizer.lr, 'loss': loss.item(), **parts})
                step += 1
                progress.update()
                progress.set_postfix(loss=f'{loss.item():.4f}')

    if prompter is not None and prompter.checksum() != checksum:
        raise StateError('prompter parameters changed during QA training')
    train_report, _ = evaluate(reasoner, train_samples, clips, vocabulary, seed, config.train.batch_size)
    report, predictions = evaluate(reasoner, heldout_samples, clips, vocabulary, seed, config.train.batch_size)
    duration = time.time() - start_time
    logger.info(f'QA training ({step} steps) took {duration:.2} seconds; '
                f'train accuracy {train_report["accuracy_overall"]:.3f}, held-out {report["accuracy_overall"]:.3f}')
    return QAResult(reasoner, report, train_report, pd.DataFrame(rows, columns=LOSS_COLUMNS), predictions)


def evaluate(reasoner: Reasoner, samples: list, clips: dict, vocabulary: Vocabulary, seed: int = 0,
             batch_size: int = 8) -> tuple:
    """Accuracy report plus a per-sample prediction table."""
    rows = []
    for batch in _qa_batches(samples, batch_size, np.random.default_rng(0)):
        chunk = [samples[i] for i in sorted(batch)]
        out = reasoner.forward(np.stack([clips[s.video_id] for s in chunk]), chunk, vocabulary)
        predicted = Prediction(out.logits).index
        for sample, truth, guess in zip(chunk, answer_truth(chunk, reasoner), np.atleast_1d(predicted)):
            rows.append({'video_id': sample.video_id, 'question': sample.question,
                         'question_type': sample.question_type, 'truth': int(truth), 'predicted': int(guess)})
    predictions = (
        pd.DataFrame(rows, columns=['video_id', 'question', 'question_type', 'truth', 'predicted'])
        .assign(correct=lambda df: df.truth == df.predicted)
        .sort_values(['video_id', 'question_type'])
        .reset_index(drop=True)
    )
    if predictions.empty:
        logger.warning('evaluating on an empty sample set')
    by_type = predictions.groupby('question_type').correct.mean().sort_index()
    report = {
        'accuracy_overall': float(predictions.correct.mean()) if len(predictions) else 0.0,
        'accuracy_by_question_type': {k: float(v) for k, v in by_type.items()},
        'num_samples': int(len(predictions)),
        'seed': int(seed),
    }
    return report, predictions


# experiments

def run_ablation(config: RunConfig, dataset: QADataset, heuristics, prompt_sizes: tuple, vocabulary: Vocabulary,
                 seeds: tuple | None = None, settings: dict | None = None) -> pd.DataFrame:
    """Held-out accuracy per (heuristic weighting, seed): none, entity-only, action-only, fixed 1:1, gated."""
    seeds = config.train.ablation_seeds if seeds is None else seeds
    settings = ABLATION_SETTINGS if settings is None else settings
    rows = []
    for seed in seeds:
        for name, loss_config in settings.items():
            run_config = replace(config, loss=replace(loss_config, gate_hidden=config.loss.gate_hidden,
                                                      gate_dropout=config.loss.gate_dropout),
                                 train=replace(config.train, progress=False))
            result = run_train_qa(run_config, dataset, heuristics, prompt_sizes, vocabulary, seed=seed)
            rows.append({'setting': name, 'seed': seed, 'accuracy': result.report['accuracy_overall'],
                         'train_accuracy': result.train_report['accuracy_overall']})
            logger.info(f'Ablation {name} seed {seed}: held-out accuracy {rows[-1]["accuracy"]:.3f}')
    return pd.DataFrame(rows)


def ablation_summary(table: pd.DataFrame) -> pd.DataFrame:
    order = {name: i for i, name in enumerate(ABLATION_SETTINGS)}
    return (
        table
        .groupby('setting', as_index=False)
        .agg(accuracy=('accuracy', 'mean'), accuracy_std=('accuracy', 'std'), seeds=('seed', 'count'))
        .assign(rank=lambda df: df.setting.map(order))
        .sort_values('rank')
        .drop(columns='rank')
        .reset_index(drop=True)
    )


def loss_curve_figure(loss_log: pd.DataFrame) -> go.Figure:
    fig = go.Figure()
    if 'branch' in loss_log.columns:
        for branch in loss_log.branch.unique().tolist():
            dff = loss_log.query('branch == @branch')
            fig.add_trace(go.Scatter(x=dff.step, y=dff.loss, mode='lines', name=f'{branch} loss',
                                     line=dict(width=0.75)))
    else:
        for column in [c for c in LOSS_COLUMNS[2:] if c in loss_log.columns]:
            fig.add_trace(go.Scatter(x=loss_log.step, y=loss_log[column], mode='lines', name=column,
                                     line=dict(width=0.75)))
    fig.update_layout(title='Loss by Step', xaxis_title='Step', yaxis_title='Value')
    return fig


# gradient verification

GRAD_CHECK_THRESHOLDS = {
    'softmax-cross-entropy': 1e-6,
    'contrastive-log-tau': 1e-5,
    'text-similarity': 1e-5,
    'fusion': 1e-5,
    'reasoner-loss': 1e-4,
}


def _grad_check_cases(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    vocabulary = build_vocabulary(['what is the ball doing', 'advance retreat grow shrink'])
    video_config = VideoEncoderConfig(layers=1, dim=8, heads=2, patch_size=4, max_frames=4, max_patches=4)
    text_config = TextEncoderConfig(layers=2, dim=8, heads=2, max_length=12, vocab_size=len(vocabulary))
    head = ProjectionHead.create(rng, 8, 4)
    text_encoder = TextEncoder.create(text_config, rng)
    reasoner = Reasoner.create(video_config, text_config, ReasonerConfig(fusion_layers=1), LossConfig(mode='gated'),
                               3, 2, rng)

    logits = Tensor(rng.normal(size=5), requires_grad=True)
    target = softmax(Tensor(rng.normal(size=5))).data
    video_cls, text_cls = Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(3, 8)))
    v_cls = Tensor(rng.normal(size=8))
    sequence = tokenize('what is the ball doing', vocabulary)
    video_tokens = Embedding(Tensor(rng.normal(size=8)), Tensor(rng.normal(size=(5, 8))))
    text_tokens = Embedding(Tensor(rng.normal(size=8)), Tensor(rng.normal(size=(4, 8))))
    weights = rng.normal(size=8)

    sample = QASample('v', 'what is the ball doing', ('advance', 'retreat'), 1, 'action', 'ball', 'advance')
    clip = rng.uniform(size=(1, 3, 2, 8, 8))
    store = HeuristicStore({
        ('v', 'action'): {'scores': [0.6, 0.3, 0.1], 'kept': True},
        ('v', 'entity'): {'scores': [0.2, 0.8], 'kept': True},
    })
    fused = reasoner.fusion[0]
    return {
        'softmax-cross-entropy': (lambda x: soft_cross_entropy(target, softmax(x)), [logits]),
        'contrastive-log-tau': (lambda log_tau: vtc_loss(video_cls, text_cls, head), [head.log_tau]),
        'text-similarity': (
            lambda *_: similarity(v_cls, encode_text(TokenSequence((CLS,)) + sequence, text_encoder).cls, head),
            [head.text_projection.weight, text_encoder.norm.gamma, text_encoder.blocks[0].attention.query.weight]),
        'fusion': (
            lambda *_: (fuse(video_tokens, text_tokens, reasoner).e_cls * weights).sum(),
            [fused.cross_attention.value.weight, fused.ffn.projection.bias]),
        'reasoner-loss': (
            lambda *_: qa_step_losses(reasoner, clip, [sample], vocabulary, store, LossConfig(mode='gated'))['loss'],
            [reasoner.answer_head.weight, reasoner.action_head.weight, reasoner.entity_head.weight,
             reasoner.gate.output.weight, reasoner.norm.gamma]),
    }


def grad_check_report(seed: int = 0) -> pd.DataFrame:
    """Max relative finite-difference error per component against its threshold."""
    rows = []
    for name, (function, inputs) in _grad_check_cases(seed).items():
        start_time = time.time()
        error = grad_check(function, inputs, epsilon=1e-6 if name == 'softmax-cross-entropy' else 1e-5)
        duration = time.time() - start_time
        logger.info(f'Gradient check {name} took {duration:.2} seconds')
        threshold = GRAD_CHECK_THRESHOLDS[name]
        rows.append({'component': name, 'max_rel_error': error, 'threshold': threshold, 'passed': error < threshold})
    return pd.DataFrame(rows)

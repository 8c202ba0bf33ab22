"""
Video tensors: file I/O, sparse frame sampling, temporal/spatial crops,
patch masking, and the synthetic moving-shapes QA generator.
"""
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, DataError, FormatError
from .parallel import map_in_order
from .textproc import QASample

logger = logging.getLogger(__name__)

MAGIC = b'VTEN'
MAX_NDIM = 8
MAX_ELEMENTS = 2 ** 31
MAX_CROP_RETRIES = 100
MIN_SYNTH_FRAME = 16

# (word, shape, rgb)
ENTITIES = (
    ('ball', 'circle', (0.95, 0.20, 0.20)),
    ('box', 'square', (0.20, 0.90, 0.30)),
    ('tent', 'triangle', (0.25, 0.40, 0.95)),
    ('cross', 'cross', (0.95, 0.90, 0.20)),
    ('diamond', 'diamond', (0.90, 0.30, 0.90)),
    ('ring', 'ring', (0.20, 0.90, 0.90)),
)
# (word, dx, dy, scale direction)
ACTIONS = (
    ('advance', 1, 0, 0),
    ('retreat', -1, 0, 0),
    ('grow', 0, 0, 1),
    ('shrink', 0, 0, -1),
    ('rise', 0, -1, 0),
    ('fall', 0, 1, 0),
)
QUESTION_TYPES = ('entity', 'action', 'composition')


@dataclass(frozen=True, eq=False)
class VideoTensor:
    payload: np.ndarray

    def __post_init__(self) -> None:
        payload = self.payload
        if payload.ndim != 4:
            raise ArgumentError(f'video payload must be C x F x H x W, got shape {list(payload.shape)}')
        if payload.shape[1] < 1:
            raise ArgumentError('video needs at least one frame')
        if not np.all(np.isfinite(payload)) or payload.min(initial=0.0) < 0.0 or payload.max(initial=0.0) > 1.0:
            raise ArgumentError('video values must lie in [0, 1]')

    @property
    def channels(self) -> int:
        return self.payload.shape[0]

    @property
    def frames(self) -> int:
        return self.payload.shape[1]

    @property
    def height(self) -> int:
        return self.payload.shape[2]

    @property
    def width(self) -> int:
        return self.payload.shape[3]


@dataclass(frozen=True)
class CropSpec:
    mode: str
    rects: tuple
    crop_count: int


@dataclass(frozen=True)
class SynthScene:
    entity: int
    action: int
    center: tuple
    radius: float
    seed: int


@dataclass
class CropConfig:
    num_frames: int = 8
    crop_hw: tuple = (24, 24)
    temporal_crops: int = 4
    spatial_crops: int = 4
    mask_range: tuple = (0.5, 0.7)
    patch_size: int = 8
    resize_hw: tuple | None = None
    mask_at_inference: bool = False


@dataclass
class QADataset:
    videos: dict
    samples: list
    scenes: list = field(default_factory=list)

    @property
    def video_ids(self) -> list:
        return list(self.videos)

    def labels(self) -> dict:
        return {s.video_id: (s.entity_label, s.action_label) for s in self.samples}


# tensor files

def store_tensor(array: np.ndarray, path: Path) -> None:
    header = MAGIC + np.array([array.ndim, *array.shape], dtype='<u4').tobytes()
    with open(path, 'wb') as f:
        f.write(header + np.ascontiguousarray(array, dtype='<f4').tobytes())


def load_tensor(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f'bad magic in {path}', 0)
    if len(raw) < 8:
        raise FormatError(f'truncated header in {path}', len(raw))
    ndim = int(np.frombuffer(raw, dtype='<u4', count=1, offset=4)[0])
    if ndim > MAX_NDIM:
        raise FormatError(f'dimension overflow in {path}: ndim {ndim}', 4)
    header_end = 8 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f'truncated header in {path}', len(raw))
    dims = [int(d) for d in np.frombuffer(raw, dtype='<u4', count=ndim, offset=8)]
    count = int(np.prod(dims, dtype=object)) if dims else 1
    if count > MAX_ELEMENTS:
        raise FormatError(f'dimension overflow in {path}: {dims}', 8)
    expected = header_end + 4 * count
    if len(raw) < expected:
        raise FormatError(f'truncated payload in {path}: expected {4 * count} bytes, found {len(raw) - header_end}', len(raw))
    if len(raw) > expected:
        raise FormatError(f'trailing bytes in {path}', expected)
    return np.frombuffer(raw, dtype='<f4', count=count, offset=header_end).reshape(dims).astype(np.float32)


def store_video(video: VideoTensor, path: Path) -> None:
    store_tensor(video.payload, path)


def load_video(path: Path) -> VideoTensor:
    array = load_tensor(path)
    if array.ndim != 4:
        raise FormatError(f'{path} holds a rank-{array.ndim} tensor, videos are rank 4', 4)
    return VideoTensor(array)


# sampling, cropping, masking

def sample_frame_indices(num_frames: int, n: int, seed) -> np.ndarray:
    """One uniformly drawn index per equal segment of [0, num_frames)."""
    if not 1 <= n <= num_frames:
        raise ArgumentError(f'cannot sample {n} frames from {num_frames}')
    rng = np.random.default_rng(seed)
    bounds = np.floor(np.linspace(0, num_frames, n + 1)).astype(int)
    return np.array([rng.integers(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])])


def sample_frames(video: VideoTensor, n: int, seed) -> VideoTensor:
    return VideoTensor(video.payload[:, sample_frame_indices(video.frames, n, seed)])


def resize_video(video: VideoTensor, hw: tuple) -> VideoTensor:
    h, w = hw
    factors = (1, 1, h / video.height, w / video.width)
    resized = ndimage.zoom(video.payload.astype(np.float64), factors, order=1)
    return VideoTensor(np.clip(resized, 0.0, 1.0).astype(np.float32))


def _check_crop(video: VideoTensor, crop_count: int, crop_hw: tuple) -> None:
    h, w = crop_hw
    if crop_count < 1:
        raise ArgumentError(f'crop_count must be positive, got {crop_count}')
    if h > video.height or w > video.width or h < 1 or w < 1:
        raise ArgumentError(f'crop {h}x{w} does not fit frames of {video.height}x{video.width}')


def _draw_rect(rng: np.random.Generator, video: VideoTensor, crop_hw: tuple) -> tuple:
    h, w = crop_hw
    y = int(rng.integers(0, video.height - h + 1))
    x = int(rng.integers(0, video.width - w + 1))
    return (x, y, w, h)


def apply_rects(video: VideoTensor, rects: tuple) -> VideoTensor:
    frames = [video.payload[:, f, y:y + h, x:x + w] for f, (x, y, w, h) in enumerate(rects)]
    return VideoTensor(np.stack(frames, axis=1))


def temporal_crop_set(video: VideoTensor, crop_count: int, crop_hw: tuple, seed) -> list:
    """Crops that reuse one rectangle on every frame."""
    _check_crop(video, crop_count, crop_hw)
    rng = np.random.default_rng(seed)
    crops = []
    for _ in range(crop_count):
        rects = (_draw_rect(rng, video, crop_hw),) * video.frames
        crops.append((apply_rects(video, rects), CropSpec('temporal', rects, crop_count)))
    return crops


def spatial_crop_set(video: VideoTensor, crop_count: int, crop_hw: tuple, seed) -> list:
    """Crops that draw an independent rectangle per frame, at least two distinct when F >= 2."""
    _check_crop(video, crop_count, crop_hw)
    if video.frames >= 2 and tuple(crop_hw) == (video.height, video.width):
        raise ArgumentError('a full-frame crop cannot vary across frames')
    rng = np.random.default_rng(seed)
    crops = []
    for _ in range(crop_count):
        for _ in range(MAX_CROP_RETRIES):
            rects = tuple(_draw_rect(rng, video, crop_hw) for _ in range(video.frames))
            if video.frames < 2 or len(set(rects)) >= 2:
                break
        else:
            raise ArgumentError(f'no distinct spatial rectangles after {MAX_CROP_RETRIES} draws')
        crops.append((apply_rects(video, rects), CropSpec('spatial', rects, crop_count)))
    return crops


def _check_fraction_range(fraction_range: tuple) -> None:
    lo, hi = fraction_range
    if lo > hi:
        raise ArgumentError(f'degenerate masking range {fraction_range}')
    if lo < 0.0 or hi >= 1.0:
        raise ArgumentError(f'masking range must lie in [0, 1), got {fraction_range}')


def random_patch_mask(grid: tuple, fraction_range: tuple, seed) -> tuple:
    """(boolean patch grid, drawn fraction); True marks a zeroed patch."""
    _check_fraction_range(fraction_range)
    rng = np.random.default_rng(seed)
    fraction = float(rng.uniform(*fraction_range))
    patch_count = grid[0] * grid[1]
    chosen = rng.choice(patch_count, size=int(round(fraction * patch_count)), replace=False)
    mask = np.zeros(patch_count, dtype=bool)
    mask[chosen] = True
    return mask.reshape(grid), fraction


def random_mask(video: VideoTensor, fraction_range: tuple = (0.5, 0.7), patch_size: int = 8, seed=0) -> VideoTensor:
    if video.height % patch_size or video.width % patch_size:
        raise ArgumentError(f'patch size {patch_size} does not divide {video.height}x{video.width}')
    grid = (video.height // patch_size, video.width // patch_size)
    mask, _ = random_patch_mask(grid, fraction_range, seed)
    pixels = mask.repeat(patch_size, axis=0).repeat(patch_size, axis=1)
    return VideoTensor(np.where(pixels, np.float32(0.0), video.payload))


def prepare_crops(video: VideoTensor, mode: str, config: CropConfig, seed, masked: bool = False) -> list:
    """sample -> optional resize -> temporal or spatial crops -> optional masking."""
    sample_seed, crop_seed, mask_seed = np.random.SeedSequence(seed).generate_state(3)
    clip = sample_frames(video, min(config.num_frames, video.frames), sample_seed)
    if config.resize_hw is not None:
        clip = resize_video(clip, config.resize_hw)
    match mode:
        case 'temporal':
            crops = temporal_crop_set(clip, config.temporal_crops, config.crop_hw, crop_seed)
        case 'spatial':
            crops = spatial_crop_set(clip, config.spatial_crops, config.crop_hw, crop_seed)
        case _:
            raise ArgumentError(f'unknown crop mode {mode!r}')
    if masked:
        crops = [(random_mask(crop, config.mask_range, config.patch_size, [mask_seed, i]), spec)
                 for i, (crop, spec) in enumerate(crops)]
    return crops


# synthetic moving-shapes data

def _shape_mask(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    d2 = dx * dx + dy * dy
    match shape:
        case 'circle':
            return d2 <= r * r
        case 'square':
            return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * r
        case 'triangle':
            return (dy >= -r) & (dy <= 0.8 * r) & (np.abs(dx) <= (dy + r) / 2)
        case 'cross':
            arm = max(r / 3, 0.5)
            return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
        case 'diamond':
            return np.abs(dx) + np.abs(dy) <= r
        case 'ring':
            return (d2 <= r * r) & (d2 >= (r / 2) ** 2)
    raise ArgumentError(f'unknown shape {shape!r}')


def _motion_span(frame_hw: int) -> float:
    return frame_hw / 3


def _base_radius(frame_hw: int) -> float:
    return frame_hw / 8


def render_scene(scene: SynthScene, frame_hw: int, num_frames: int) -> VideoTensor:
    _, shape, color = ENTITIES[scene.entity]
    _, move_x, move_y, scale = ACTIONS[scene.action]
    span = _motion_span(frame_hw)
    yy, xx = np.mgrid[0:frame_hw, 0:frame_hw] + 0.5
    payload = np.zeros((3, num_frames, frame_hw, frame_hw), dtype=np.float32)
    for t in range(num_frames):
        u = t / (num_frames - 1) if num_frames > 1 else 0.0
        cx = scene.center[0] + move_x * span * u
        cy = scene.center[1] + move_y * span * u
        r = scene.radius * (1.0 + scale * 0.4 * (2 * u - 1))
        mask = _shape_mask(shape, xx - cx, yy - cy, r)
        for c in range(3):
            payload[c, t][mask] = color[c]
    return VideoTensor(payload)


def _draw_scene(entity: int, action: int, frame_hw: int, seed) -> SynthScene:
    rng = np.random.default_rng(seed)
    _, move_x, move_y, _ = ACTIONS[action]
    span = _motion_span(frame_hw)
    radius = _base_radius(frame_hw)
    margin = 1.4 * radius + 1
    center = tuple(
        float(rng.uniform(margin + max(0, -move) * span, frame_hw - margin - max(0, move) * span))
        for move in (move_x, move_y)
    )
    return SynthScene(entity, action, center, radius, int(np.random.SeedSequence(seed).generate_state(1)[0]))


def _question_set(index: int, scene: SynthScene, num_candidates: int, entity_words: list, action_words: list,
                  video_id: str, seed) -> list:
    rng = np.random.default_rng(seed)
    entity, action = entity_words[scene.entity], action_words[scene.action]
    families = (
        ('entity', 'what is in the video', entity, entity_words),
        ('action', 'what is the thing doing', action, action_words),
        ('composition', f'what is the {entity} doing', action, action_words),
    )
    samples = []
    for offset, (family, question, answer, pool) in enumerate(families):
        distractors = [w for w in pool if w != answer]
        chosen = [distractors[i] for i in rng.permutation(len(distractors))[:num_candidates - 1]]
        position = (index + offset) % num_candidates
        candidates = chosen[:position] + [answer] + chosen[position:]
        samples.append(QASample(video_id, question, tuple(candidates), position, family, entity, action))
    return samples


def generate_synth_dataset(num_videos: int, num_entities: int, num_actions: int, frame_hw: int = 32,
                           num_frames: int = 32, seed: int = 0, num_candidates: int = 4,
                           parallel: bool = True) -> QADataset:
    """
    Each video shows one entity class performing one action class. Video i
    gets the (entity, action) pair i mod (E * A), so the grid is balanced
    whenever num_videos is a multiple of E * A. Three MC questions per video.
    """
    if not 2 <= num_entities <= len(ENTITIES) or not 2 <= num_actions <= len(ACTIONS):
        raise ArgumentError(f'need 2..{len(ENTITIES)} entities and 2..{len(ACTIONS)} actions')
    if frame_hw < MIN_SYNTH_FRAME:
        raise ArgumentError(f'frames of {frame_hw} pixels are too small to render shapes (min {MIN_SYNTH_FRAME})')
    if num_frames < 1 or num_videos < 1:
        raise ArgumentError('num_frames and num_videos must be positive')
    start_time = time.time()
    num_candidates = max(2, min(num_candidates, num_entities, num_actions))
    entity_words = [word for word, _, _ in ENTITIES[:num_entities]]
    action_words = [word for word, *_ in ACTIONS[:num_actions]]

    def build(index: int) -> tuple:
        pair = index % (num_entities * num_actions)
        scene = _draw_scene(pair // num_actions, pair % num_actions, frame_hw, [seed, index])
        video_id = f'video{index:05d}'
        samples = _question_set(index, scene, num_candidates, entity_words, action_words, video_id, [seed, index, 1])
        return video_id, scene, render_scene(scene, frame_hw, num_frames), samples

    built = map_in_order(build, range(num_videos), parallel=parallel)
    dataset = QADataset(
        videos={video_id: video for video_id, _, video, _ in built},
        samples=[sample for *_, samples in built for sample in samples],
        scenes=[scene for _, scene, _, _ in built],
    )
    duration = time.time() - start_time
    logger.info(f'Synthetic dataset of {num_videos} videos took {duration:.2} seconds')
    return dataset


def motion_oracle(video: VideoTensor) -> str:
    """Action word recovered from frame-difference centroid and area changes."""
    occupied = video.payload.max(axis=0) > 0
    first, last = occupied[0], occupied[-1]
    ys, xs = np.nonzero(first)
    ye, xe = np.nonzero(last)
    if len(xs) == 0 or len(xe) == 0:
        raise ArgumentError('motion oracle needs a visible object in the first and last frame')
    dx, dy = xe.mean() - xs.mean(), ye.mean() - ys.mean()
    ratio = len(xe) / len(xs)
    if abs(np.log(ratio)) > np.log(2.0):
        return 'grow' if ratio > 1 else 'shrink'
    if abs(dx) >= abs(dy):
        return 'advance' if dx > 0 else 'retreat'
    return 'fall' if dy > 0 else 'rise'


# manifests

MANIFEST_KEYS = ('video_path', 'question', 'candidates', 'answer_index', 'entity_label', 'action_label', 'question_type')


def write_dataset(dataset: QADataset, directory: Path) -> Path:
    directory = Path(directory)
    (directory / 'videos').mkdir(parents=True, exist_ok=True)
    for video_id, video in dataset.videos.items():
        store_video(video, directory / 'videos' / f'{video_id}.vten')
    manifest = directory / 'manifest.jsonl'
    with open(manifest, 'w', encoding='utf-8') as f:
        for s in dataset.samples:
            record = {
                'video_path': f'videos/{s.video_id}.vten',
                'question': s.question,
                'candidates': list(s.candidates),
                'answer_index': s.answer_index,
                'entity_label': s.entity_label,
                'action_label': s.action_label,
                'question_type': s.question_type,
            }
            f.write(json.dumps(record) + '\n')
    return manifest


def load_manifest(path: Path) -> list:
    samples = []
    with open(path, encoding='utf-8') as f:
        for line_number, line in enumerate(f):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                samples.append(QASample(
                    video_id=Path(record['video_path']).stem,
                    question=record['question'],
                    candidates=tuple(record['candidates']),
                    answer_index=int(record['answer_index']),
                    question_type=record['question_type'],
                    entity_label=record['entity_label'],
                    action_label=record['action_label'],
                ))
            except (KeyError, ValueError, TypeError) as e:
                raise FormatError(f'bad manifest record on line {line_number + 1} of {path}: {e}') from e
    return samples


def load_dataset(directory: Path) -> QADataset:
    directory = Path(directory)
    if not (directory / 'manifest.jsonl').exists():
        raise DataError(f'no manifest.jsonl in {directory}')
    samples = load_manifest(directory / 'manifest.jsonl')
    videos = {}
    for sample in samples:
        if sample.video_id not in videos:
            path = directory / 'videos' / f'{sample.video_id}.vten'
            if not path.exists():
                raise DataError(f'manifest names a missing video file {path}')
            videos[sample.video_id] = load_video(path)
    return QADataset(videos, samples)

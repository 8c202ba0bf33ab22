"""
Run configuration: dataclass defaults < JSON file < `--key=value` flags.

Sections are the module dataclasses themselves, so rebuilding a section with
`dataclasses.replace` re-runs its validation. Keys are dotted paths
(`loss.alpha`, `crops.crop_hw`); top-level keys have no dot.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .encoders import TextEncoderConfig, VideoEncoderConfig
from .errors import ConfigurationError, DataError
from .prompter import DEFAULT_THRESHOLD, TOP_K, PrompterConfig
from .reasoner import LossConfig, ReasonerConfig
from .videoproc import CropConfig

logger = logging.getLogger(__name__)

RUNS_DIR = Path('runs')
# excluded from the run hash: they name where outputs go, not what they are
UNHASHED_KEYS = ('out', 'log_level')


@dataclass
class SynthConfig:
    num_videos: int = 48
    num_entities: int = 4
    num_actions: int = 4
    frame_hw: int = 32
    num_frames: int = 32
    num_candidates: int = 4
    parallel: bool = True


@dataclass
class HeuristicConfig:
    top_terms: int = 32
    template_mode: str = 'single'
    threshold: float = DEFAULT_THRESHOLD
    top_dump: int = TOP_K
    lexicon: str = ''
    parallel: bool = True

    def __post_init__(self) -> None:
        if self.template_mode not in ('single', 'complex', 'simple'):
            raise ConfigurationError(f'unknown template mode {self.template_mode!r}')
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigurationError(f'threshold must lie in [0, 1], got {self.threshold}')


@dataclass
class TrainConfig:
    epochs: int = 30
    pretrain_epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.001
    max_grad_norm: float = 1.0
    holdout_fraction: float = 0.25
    max_missing_fraction: float = 0.1
    freeze_prompter: bool = True
    progress: bool = True
    ablation_seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ConfigurationError(f'batch size must be at least 2, got {self.batch_size}')
        if self.epochs < 1 or self.pretrain_epochs < 1:
            raise ConfigurationError('epoch counts must be positive')
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigurationError(f'holdout fraction must lie in [0, 1), got {self.holdout_fraction}')
        if not 0.0 <= self.max_missing_fraction <= 1.0:
            raise ConfigurationError(f'max missing fraction must lie in [0, 1], got {self.max_missing_fraction}')


@dataclass
class RunConfig:
    seed: int = 0
    data: str = 'data'
    out: str = ''
    log_level: str = 'INFO'
    synth: SynthConfig = field(default_factory=SynthConfig)
    video: VideoEncoderConfig = field(default_factory=VideoEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    prompter: PrompterConfig = field(default_factory=PrompterConfig)
    crops: CropConfig = field(default_factory=CropConfig)
    heuristics: HeuristicConfig = field(default_factory=HeuristicConfig)
    model: ReasonerConfig = field(default_factory=ReasonerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if self.crops.patch_size != self.video.patch_size:
            raise ConfigurationError(f'crop masking patch {self.crops.patch_size} differs from the encoder '
                                     f'patch {self.video.patch_size}')
        if any(side % self.video.patch_size for side in self.crops.crop_hw):
            raise ConfigurationError(f'crop {self.crops.crop_hw} is not divisible by patch {self.video.patch_size}')
        if self.video.dim != self.text.dim:
            raise ConfigurationError(f'video dim {self.video.dim} and text dim {self.text.dim} must agree')


def _coerce(key: str, value, current):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f'{key} expects true or false, got {value!r}')
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f'{key} expects an integer, got {value!r}')
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f'{key} expects a number, got {value!r}')
        return float(value)
    if isinstance(current, str):
        return value if isinstance(value, str) else json.dumps(value)
    if isinstance(current, tuple) or current is None:
        if value is None:
            return None
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f'{key} expects a list, got {value!r}')
        return tuple(value)
    raise ConfigurationError(f'{key} cannot be set from {value!r}')


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """Apply dotted-key overrides; unknown keys raise ConfigurationError."""
    top, sections = {}, {}
    names = {f.name for f in fields(config)}
    for key, value in overrides.items():
        head, _, rest = key.partition('.')
        if head not in names:
            raise ConfigurationError(f'unknown config key {key!r}')
        section = getattr(config, head)
        if not is_dataclass(section):
            if rest:
                raise ConfigurationError(f'unknown config key {key!r}')
            top[head] = _coerce(key, value, section)
            continue
        if not rest or rest not in {f.name for f in fields(section)}:
            raise ConfigurationError(f'unknown config key {key!r}')
        sections.setdefault(head, {})[rest] = _coerce(key, value, getattr(section, rest))
    for head, values in sections.items():
        top[head] = replace(getattr(config, head), **values)
    return replace(config, **top)


def flatten(data: dict, prefix: str = '') -> dict:
    flat = {}
    for key, value in data.items():
        if isinstance(value, dict):
            flat.update(flatten(value, f'{prefix}{key}.'))
        else:
            flat[f'{prefix}{key}'] = value
    return flat


def parse_value(raw: str):
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def load_config(path: Path | str | None = None, overrides: dict | None = None) -> RunConfig:
    config = RunConfig()
    if path:
        try:
            with open(path, encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigurationError(f'config file {path} does not exist') from e
        except ValueError as e:
            raise ConfigurationError(f'config file {path} is not valid JSON: {e}') from e
        if not isinstance(data, dict):
            raise ConfigurationError(f'config file {path} must hold a JSON object')
        config = apply_overrides(config, flatten(data))
    return apply_overrides(config, overrides or {})


def to_dict(config: RunConfig) -> dict:
    return json.loads(json.dumps(asdict(config)))


def config_hash(config: RunConfig) -> str:
    data = {k: v for k, v in to_dict(config).items() if k not in UNHASHED_KEYS}
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode('utf-8')).hexdigest()


def run_directory(command: str, config: RunConfig) -> Path:
    if config.out:
        return Path(config.out)
    return RUNS_DIR / f'{command}-{config_hash(config)[:8]}-s{config.seed}'


def write_config(config: RunConfig, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / 'config.json'
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(to_dict(config), f, indent=2, sort_keys=True)
        f.write('\n')
    return path


# artifact file names inside a data or output directory
ARTIFACTS = {
    'manifest': 'manifest.jsonl',
    'vocabulary': 'vocabulary.tsv',
    'verbs': 'verbs.tsv',
    'nouns': 'nouns.tsv',
    'action_prompts': 'prompts_action.jsonl',
    'entity_prompts': 'prompts_entity.jsonl',
    'prompter': 'prompter.ckpt',
    'pretrain_losses': 'pretrain_losses.csv',
    'heuristics': 'heuristics.jsonl',
    'reasoner': 'reasoner.ckpt',
    'losses': 'losses.csv',
    'report': 'report.json',
    'train_report': 'train_report.json',
    'predictions': 'predictions.csv',
    'ablation': 'ablation.csv',
    'ablation_summary': 'ablation_summary.csv',
    'grad_check': 'grad_check.csv',
    'loss_curve': 'loss_curve.html',
}


def input_path(config: RunConfig, artifact: str) -> Path:
    path = Path(config.data) / ARTIFACTS.get(artifact, artifact)
    if not path.exists():
        raise DataError(f'missing input {path}')
    return path


def prepare_run(command: str, config: RunConfig) -> Path:
    """Create the run's output directory and write the resolved config into it."""
    directory = run_directory(command, config)
    write_config(config, directory)
    logger.info(f'{command} writes to {directory}')
    return directory

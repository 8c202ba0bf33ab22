import numpy as np
import pytest

from heurvidqa.config import load_config
from heurvidqa.encoders import TextEncoderConfig, VideoEncoderConfig
from heurvidqa.textproc import (ACTION_TEMPLATES, ENTITY_TEMPLATES, build_vocabulary, instantiate_templates,
                                templates_for)
from heurvidqa.videoproc import ACTIONS, ENTITIES, CropConfig, VideoTensor, generate_synth_dataset

ACTION_WORDS = [word for word, *_ in ACTIONS[:4]]
ENTITY_WORDS = [word for word, *_ in ENTITIES[:4]]


@pytest.fixture(scope='session')
def vocabulary():
    texts = ['what is in the video', 'what is the thing doing', *ACTION_WORDS, *ENTITY_WORDS]
    texts += [t.replace('{}', '') for t in ACTION_TEMPLATES + ENTITY_TEMPLATES]
    return build_vocabulary(texts + [f'what is the {entity} doing' for entity in ENTITY_WORDS])


@pytest.fixture
def video_config():
    return VideoEncoderConfig(layers=1, dim=8, heads=2, patch_size=4, max_frames=4, max_patches=16)


@pytest.fixture
def text_config(vocabulary):
    return TextEncoderConfig(layers=1, dim=8, heads=2, max_length=16, vocab_size=len(vocabulary))


@pytest.fixture
def crop_config():
    return CropConfig(num_frames=2, crop_hw=(8, 8), temporal_crops=2, spatial_crops=3, patch_size=4)


@pytest.fixture
def prompt_sets():
    return {
        'action': instantiate_templates(ACTION_WORDS[:3], 'action', templates_for('action')),
        'entity': instantiate_templates(ENTITY_WORDS[:2], 'entity', templates_for('entity')),
    }


def random_video(seed: int = 0, frames: int = 4, hw: int = 16) -> VideoTensor:
    return VideoTensor(np.random.default_rng(seed).uniform(size=(3, frames, hw, hw)).astype(np.float32))


# a run small enough for end-to-end tests
TINY_OVERRIDES = {
    'video.layers': 1, 'video.dim': 8, 'video.heads': 2, 'video.patch_size': 4, 'video.max_frames': 4,
    'video.max_patches': 16,
    'text.layers': 1, 'text.dim': 8, 'text.heads': 2, 'text.max_length': 16,
    'prompter.projection_dim': 4,
    'crops.num_frames': 2, 'crops.crop_hw': [8, 8], 'crops.temporal_crops': 2, 'crops.spatial_crops': 2,
    'crops.patch_size': 4,
    'synth.num_videos': 8, 'synth.num_entities': 2, 'synth.num_actions': 2, 'synth.frame_hw': 16,
    'synth.num_frames': 4, 'synth.parallel': False,
    'heuristics.parallel': False,
    'train.epochs': 1, 'train.pretrain_epochs': 1, 'train.batch_size': 4, 'train.progress': False,
}


@pytest.fixture
def run_config():
    return load_config(overrides=TINY_OVERRIDES)


@pytest.fixture(scope='session')
def tiny_dataset():
    return generate_synth_dataset(8, 2, 2, frame_hw=16, num_frames=4, seed=0, parallel=False)

import logging
from pathlib import Path

import click

from heurvidqa.config import ARTIFACTS, RunConfig, input_path, prepare_run
from heurvidqa.textproc import (ACTION_TEMPLATES, ENTITY_TEMPLATES, LEXICON_DIR, SIMPLE_TEMPLATE, build_vocabulary,
                                extract_top_terms, instantiate_templates, load_lexicon, load_terms, store_prompt_set,
                                store_terms, store_vocabulary, templates_for, term_counts)
from heurvidqa.videoproc import generate_synth_dataset, load_manifest, write_dataset

logger = logging.getLogger(__name__)


def gen_data(config: RunConfig) -> int:
    synth = config.synth
    dataset = generate_synth_dataset(synth.num_videos, synth.num_entities, synth.num_actions, synth.frame_hw,
                                     synth.num_frames, config.seed, synth.num_candidates, synth.parallel)
    out = prepare_run('gen-data', config)
    manifest = write_dataset(dataset, out)
    click.echo(f'{len(dataset.samples)} questions over {len(dataset.videos)} videos -> {manifest}')
    return 0


def extract_vocab(config: RunConfig) -> int:
    samples = load_manifest(input_path(config, 'manifest'))
    lexicon = load_lexicon(Path(config.heuristics.lexicon) if config.heuristics.lexicon else LEXICON_DIR)
    verbs, nouns = extract_top_terms(samples, lexicon, config.heuristics.top_terms)
    counts = term_counts(samples, lexicon)
    # template words join the QA texts so every prompt tokenizes without [UNK]
    texts = [text for sample in samples for text in sample.texts]
    texts += [t.replace('{}', '') for t in ACTION_TEMPLATES + ENTITY_TEMPLATES + (SIMPLE_TEMPLATE,)]

    out = prepare_run('extract-vocab', config)
    vocabulary = build_vocabulary(texts)
    store_vocabulary(vocabulary, out / ARTIFACTS['vocabulary'])
    store_terms(counts.query('kind == "verb"').head(len(verbs)), out / ARTIFACTS['verbs'])
    store_terms(counts.query('kind == "noun"').head(len(nouns)), out / ARTIFACTS['nouns'])
    click.echo(f'{len(vocabulary)} vocabulary entries, top verbs: {" ".join(verbs)}, top nouns: {" ".join(nouns)}')
    return 0


def make_prompts(config: RunConfig) -> int:
    mode = config.heuristics.template_mode
    prompt_sets = {
        'action': instantiate_templates(load_terms(input_path(config, 'verbs')), 'action', templates_for('action', mode)),
        'entity': instantiate_templates(load_terms(input_path(config, 'nouns')), 'entity', templates_for('entity', mode)),
    }
    out = prepare_run('make-prompts', config)
    for kind, prompts in prompt_sets.items():
        store_prompt_set(prompts, out / ARTIFACTS[f'{kind}_prompts'])
        logger.info(f'{kind} prompt set: {prompts.size} words, {len(prompts.flattened())} prompts ({mode})')
    click.echo(f'{prompt_sets["action"].size} action and {prompt_sets["entity"].size} entity prompt words')
    return 0

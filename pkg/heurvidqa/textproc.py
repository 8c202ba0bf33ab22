"""Tokenization, verb/noun vocabulary extraction, prompt templates and QA input conversion."""
import csv
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd

from .errors import ArgumentError, ConfigurationError, FormatError

logger = logging.getLogger(__name__)

SPECIAL_TOKENS = ('[PAD]', '[CLS]', '[MASK]', '[UNK]')
PAD, CLS, MASK, UNK = range(len(SPECIAL_TOKENS))
PLACEHOLDER = '{}'
LEXICON_DIR = Path(__file__).parent / 'lexicon'

ENTITY_TEMPLATES = (
    'A video of a {}.',
    'A video of the entity {}.',
    'A video contains the entity of {}.',
    'A shooting of a {}.',
    'A shooting of the {}.',
    'A shooting contains the entity of {}.',
    'A video footage of a {}.',
    'A video footage of the {}.',
    'A footage contains the entity of {}.',
    'A video recording about the entity of {}.',
)
ACTION_TEMPLATES = (
    'A video contains the action of {}.',
    'A video about the action of {}.',
    'A video recording about the action of {}.',
    'A video shooting of the action {}.',
    'A video of action {} being performed.',
    'A footage of the action of {}.',
    'A shooting of the action {}.',
    'A shooting of {} in action.',
    'A clip of {} in action.',
    'A clip contains the action of {}.',
)
SIMPLE_TEMPLATE = 'A video of {}.'
KINDS = ('action', 'entity')


def normalize(text: str) -> list:
    return re.sub(r'[^\w\s]', ' ', text.lower()).split()


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple

    def __len__(self) -> int:
        return len(self.ids)

    def __add__(self, other: 'TokenSequence') -> 'TokenSequence':
        return TokenSequence(self.ids + other.ids)


@dataclass
class Vocabulary:
    words: list
    counts: dict = field(default_factory=dict)
    index: dict = field(init=False)

    def __post_init__(self) -> None:
        if tuple(self.words[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ConfigurationError(f'vocabulary must start with the special tokens {SPECIAL_TOKENS}')
        self.index = {word: i for i, word in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        return self.index.get(word, UNK)


@dataclass(frozen=True)
class QASample:
    video_id: str
    question: str
    candidates: tuple = ()
    answer_index: int = 0
    question_type: str = ''
    entity_label: str = ''
    action_label: str = ''

    @property
    def answer(self) -> str:
        return self.candidates[self.answer_index]

    @property
    def texts(self) -> tuple:
        return (self.question, *self.candidates)


@dataclass(frozen=True)
class Lexicon:
    verbs: frozenset
    nouns: frozenset

    def __post_init__(self) -> None:
        # a word listed in both files is a verb
        object.__setattr__(self, 'nouns', frozenset(self.nouns) - frozenset(self.verbs))
        object.__setattr__(self, 'verbs', frozenset(self.verbs))


@dataclass(frozen=True)
class PromptSet:
    kind: str
    words: tuple
    prompts: tuple
    variants: tuple

    @property
    def size(self) -> int:
        return len(self.words)

    def flattened(self) -> list:
        """(word index, prompt) for every template instantiation, in index order."""
        return [(i, prompt) for i, group in enumerate(self.variants) for prompt in group]


def _read_word_file(path: Path) -> frozenset:
    with open(path, encoding='utf-8') as f:
        return frozenset(line.strip().lower() for line in f if line.strip())


def load_lexicon(directory: Path = LEXICON_DIR) -> Lexicon:
    directory = Path(directory)
    return Lexicon(_read_word_file(directory / 'verbs.txt'), _read_word_file(directory / 'nouns.txt'))


def build_vocabulary(texts: Iterable[str]) -> Vocabulary:
    tokens = [token for text in texts for token in normalize(text) if token not in SPECIAL_TOKENS]
    counts = (
        pd.Series(tokens, dtype='object', name='word')
        .value_counts()
        .rename_axis('word')
        .reset_index(name='count')
        .sort_values(['count', 'word'], ascending=[False, True])
    )
    return Vocabulary(list(SPECIAL_TOKENS) + counts.word.tolist(), dict(zip(counts.word, counts['count'].astype(int))))


def store_vocabulary(vocabulary: Vocabulary, path: Path) -> None:
    words = vocabulary.words[len(SPECIAL_TOKENS):]
    (
        pd.DataFrame({'word': words, 'count': [vocabulary.counts.get(w, 0) for w in words]})
        .to_csv(path, sep='\t', header=False, index=False, quoting=csv.QUOTE_NONE, lineterminator='\n')
    )


def load_vocabulary(path: Path) -> Vocabulary:
    df = pd.read_csv(path, sep='\t', header=None, names=['word', 'count'],
                     keep_default_na=False, quoting=csv.QUOTE_NONE, dtype={'word': str, 'count': np.int64})
    return Vocabulary(list(SPECIAL_TOKENS) + df.word.tolist(), dict(zip(df.word, df['count'].astype(int))))


def tokenize(text: str, vocabulary: Vocabulary) -> TokenSequence:
    return TokenSequence(tuple(vocabulary.id(token) for token in normalize(text)))


def term_counts(qa_corpus: Iterable[QASample], lexicon: Lexicon) -> pd.DataFrame:
    """Occurrences of lexicon verbs and nouns over question and answer texts."""
    tokens = [token for sample in qa_corpus for text in sample.texts for token in normalize(text)]
    if not tokens:
        return pd.DataFrame({'kind': pd.Series(dtype=str), 'word': pd.Series(dtype=str), 'count': pd.Series(dtype=np.int64)})
    df = (
        pd.DataFrame({'word': tokens})
        .assign(kind=lambda df: np.select([df.word.isin(sorted(lexicon.verbs)), df.word.isin(sorted(lexicon.nouns))],
                                          ['verb', 'noun'], default=''))
        .query('kind != ""')
        .groupby(['kind', 'word'], as_index=False)
        .size()
        .rename(columns={'size': 'count'})
        .sort_values(['kind', 'count', 'word'], ascending=[True, False, True])
        .reset_index(drop=True)
    )
    return df[['kind', 'word', 'count']]


def extract_top_terms(qa_corpus: Iterable[QASample], lexicon: Lexicon, k: int) -> tuple:
    if k < 1:
        raise ArgumentError(f'k must be at least 1, got {k}')
    if not lexicon.verbs and not lexicon.nouns:
        raise ConfigurationError('lexicon is empty')
    counts = term_counts(qa_corpus, lexicon)
    verbs = counts[counts.kind == 'verb'].word.head(k).tolist()
    nouns = counts[counts.kind == 'noun'].word.head(k).tolist()
    logger.info(f'Extracted {len(verbs)} verbs and {len(nouns)} nouns (k={k})')
    return verbs, nouns


def templates_for(kind: str, mode: str = 'single') -> tuple:
    catalog = ACTION_TEMPLATES if kind == 'action' else ENTITY_TEMPLATES
    match mode:
        case 'single':
            return catalog[:1]
        case 'complex':
            return catalog
        case 'simple':
            return (SIMPLE_TEMPLATE,)
    raise ConfigurationError(f'unknown template mode {mode!r}')


def instantiate_templates(words: Iterable[str], kind: str, templates: Iterable[str]) -> PromptSet:
    templates = tuple(templates)
    if kind not in KINDS:
        raise ConfigurationError(f'prompt kind must be one of {KINDS}, got {kind!r}')
    if not templates:
        raise ConfigurationError('at least one template is required')
    for template in templates:
        if template.count(PLACEHOLDER) != 1:
            raise ConfigurationError(f'template {template!r} must contain exactly one {PLACEHOLDER} placeholder')
    words = tuple(words)
    variants = tuple(tuple(template.replace(PLACEHOLDER, word) for template in templates) for word in words)
    return PromptSet(kind, words, tuple(group[0] for group in variants), variants)


def store_prompt_set(prompts: PromptSet, path: Path) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        for index, prompt in prompts.flattened():
            record = {'kind': prompts.kind, 'word': prompts.words[index], 'prompt': prompt, 'index': index}
            f.write(json.dumps(record) + '\n')


def load_prompt_set(path: Path) -> PromptSet:
    kinds, words, variants = set(), {}, {}
    with open(path, encoding='utf-8') as f:
        for line_number, line in enumerate(f):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                index = int(record['index'])
                kinds.add(record['kind'])
                words[index] = record['word']
                variants.setdefault(index, []).append(record['prompt'])
            except (KeyError, ValueError) as e:
                raise FormatError(f'bad prompt record on line {line_number + 1} of {path}: {e}') from e
    if len(kinds) != 1 or sorted(words) != list(range(len(words))):
        raise FormatError(f'prompt file {path} must hold one kind with contiguous indices')
    order = range(len(words))
    return PromptSet(kinds.pop(), tuple(words[i] for i in order),
                     tuple(variants[i][0] for i in order), tuple(tuple(variants[i]) for i in order))


def convert_oe(question: str, vocabulary: Vocabulary) -> TokenSequence:
    if not question.strip():
        raise ArgumentError('question must be non-empty')
    return TokenSequence((CLS,)) + tokenize(question, vocabulary)


def convert_mc(question: str, candidate: str, vocabulary: Vocabulary) -> TokenSequence:
    return convert_oe(question, vocabulary) + TokenSequence((PAD,)) + tokenize(candidate, vocabulary)


def convert_mc_batch(question: str, candidates: Iterable[str], vocabulary: Vocabulary) -> list:
    return [convert_mc(question, candidate, vocabulary) for candidate in candidates]


def store_terms(counts: pd.DataFrame, path: Path) -> None:
    """Ranked `word<TAB>count` lines, the vocabulary file layout."""
    counts[['word', 'count']].to_csv(path, sep='\t', header=False, index=False, quoting=csv.QUOTE_NONE,
                                     lineterminator='\n')


def load_terms(path: Path) -> list:
    df = pd.read_csv(path, sep='\t', header=None, names=['word', 'count'],
                     keep_default_na=False, quoting=csv.QUOTE_NONE, dtype={'word': str, 'count': np.int64})
    return df.word.tolist()

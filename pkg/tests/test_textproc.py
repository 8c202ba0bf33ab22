from collections import Counter

import pytest
from hypothesis import given
import hypothesis.strategies as st

from heurvidqa.errors import ArgumentError, ConfigurationError, FormatError
from heurvidqa.textproc import (ACTION_TEMPLATES, CLS, ENTITY_TEMPLATES, PAD, SPECIAL_TOKENS, UNK, Lexicon, QASample,
                                TokenSequence, Vocabulary, build_vocabulary, convert_mc, convert_mc_batch, convert_oe,
                                extract_top_terms, instantiate_templates, load_lexicon, load_prompt_set, load_terms,
                                load_vocabulary, store_prompt_set, store_terms, store_vocabulary, templates_for,
                                term_counts, tokenize)

LEXICON = Lexicon(frozenset({'run', 'jump', 'eat', 'cry', 'fell'}), frozenset({'dog', 'cat', 'boy', 'man'}))


@pytest.fixture
def vocabulary():
    return build_vocabulary(['why did the boy cry', 'he fell down', 'what is the man doing', 'run q'])


def sample(question, *candidates):
    return QASample('v', question, tuple(candidates), 0)


def words(sequence, vocabulary):
    return [vocabulary.words[i] for i in sequence.ids]


def test_tokenize_normalizes(vocabulary):
    assert words(tokenize('Why did the Boy cry?', vocabulary), vocabulary) == ['why', 'did', 'the', 'boy', 'cry']


def test_tokenize_empty(vocabulary):
    assert tokenize('', vocabulary) == TokenSequence(())


def test_tokenize_unknown(vocabulary):
    assert tokenize('zzzunknown run', vocabulary).ids == (UNK, vocabulary.id('run'))


def test_vocabulary_starts_with_specials_then_counts(vocabulary):
    assert tuple(vocabulary.words[:4]) == SPECIAL_TOKENS
    # 'the' appears twice, everything else once and in lexicographic order
    assert vocabulary.words[4] == 'the'
    assert vocabulary.words[5:] == sorted(vocabulary.words[5:])


def test_vocabulary_requires_specials():
    with pytest.raises(ConfigurationError):
        Vocabulary(['dog', 'cat'])


def test_vocabulary_file_round_trip(tmp_path, vocabulary):
    store_vocabulary(vocabulary, tmp_path / 'vocabulary.tsv')
    loaded = load_vocabulary(tmp_path / 'vocabulary.tsv')
    assert loaded.words == vocabulary.words
    assert loaded.counts == vocabulary.counts
    first = (tmp_path / 'vocabulary.tsv').read_text(encoding='utf-8').splitlines()[0]
    assert first == 'the\t2'


def test_top_terms_frequency_order():
    corpus = [sample('run run run run run'), sample('jump jump jump eat')]
    verbs, _ = extract_top_terms(corpus, LEXICON, 2)
    assert verbs == ['run', 'jump']


def test_top_terms_lexicographic_ties():
    corpus = [sample('dog cat', 'cat dog')]
    _, nouns = extract_top_terms(corpus, LEXICON, 2)
    assert nouns == ['cat', 'dog']


def test_top_terms_counts_answers_too():
    corpus = [sample('what is the boy doing', 'cry', 'run', 'cry')]
    verbs, nouns = extract_top_terms(corpus, LEXICON, 5)
    assert verbs == ['cry', 'run']
    assert nouns == ['boy']


def test_top_terms_fewer_than_k():
    verbs, nouns = extract_top_terms([sample('the dog can run')], LEXICON, 10)
    assert (verbs, nouns) == (['run'], ['dog'])


def test_top_terms_rejects_bad_k():
    with pytest.raises(ArgumentError):
        extract_top_terms([sample('run')], LEXICON, 0)


def test_top_terms_empty_lexicon():
    with pytest.raises(ConfigurationError):
        extract_top_terms([sample('run')], Lexicon(frozenset(), frozenset()), 3)


@given(st.lists(st.lists(st.sampled_from(['run', 'jump', 'eat', 'dog', 'cat', 'the', 'a', 'boy']), max_size=8),
                max_size=30),
       st.integers(1, 6))
def test_top_terms_match_count_sort_oracle(questions, k):
    corpus = [sample(' '.join(q) or 'x') for q in questions]
    counts = Counter(w for s in corpus for text in s.texts for w in text.split())
    oracle = lambda pool: [w for w, _ in sorted(((w, c) for w, c in counts.items() if w in pool),
                                                key=lambda item: (-item[1], item[0]))][:k]
    verbs, nouns = extract_top_terms(corpus, LEXICON, k)
    assert verbs == oracle(LEXICON.verbs)
    assert nouns == oracle(LEXICON.nouns)


def test_lexicon_resolves_duplicates_as_verbs():
    lexicon = Lexicon(frozenset({'run', 'drink'}), frozenset({'drink', 'cup'}))
    assert lexicon.nouns == frozenset({'cup'})
    assert 'drink' in lexicon.verbs


def test_packaged_lexicon_is_disjoint():
    lexicon = load_lexicon()
    assert lexicon.verbs and lexicon.nouns
    assert not lexicon.verbs & lexicon.nouns


def test_term_counts_table():
    counts = term_counts([sample('the dog can run', 'dog')], LEXICON)
    assert counts.to_dict('records') == [
        {'kind': 'noun', 'word': 'dog', 'count': 2},
        {'kind': 'verb', 'word': 'run', 'count': 1},
    ]


def test_term_files_round_trip(tmp_path):
    counts = term_counts([sample('run run jump')], LEXICON)
    store_terms(counts, tmp_path / 'verbs.tsv')
    assert load_terms(tmp_path / 'verbs.tsv') == ['run', 'jump']


def test_instantiate_entity_template():
    prompts = instantiate_templates(['dog'], 'entity', ['A video of a {}.'])
    assert prompts.prompts == ('A video of a dog.',)


def test_instantiate_action_template():
    prompts = instantiate_templates(['run'], 'action', ['A video contains the action of {}.'])
    assert prompts.prompts == ('A video contains the action of run.',)


def test_instantiate_identity_template():
    assert instantiate_templates(['cat'], 'entity', ['{}']).prompts == ('cat',)


@pytest.mark.parametrize('template', ['A video of a dog.', 'A {} and a {}.'])
def test_instantiate_requires_one_placeholder(template):
    with pytest.raises(ConfigurationError):
        instantiate_templates(['dog'], 'entity', [template])


def test_instantiate_rejects_unknown_kind():
    with pytest.raises(ConfigurationError):
        instantiate_templates(['dog'], 'object', ['{}'])


def test_complex_mode_keeps_every_variant():
    prompts = instantiate_templates(['dog', 'cat'], 'entity', templates_for('entity', 'complex'))
    assert prompts.size == 2
    assert len(prompts.variants[0]) == len(ENTITY_TEMPLATES) == 10
    assert prompts.prompts[1] == 'A video of a cat.'
    assert len(prompts.flattened()) == 20


def test_template_modes():
    assert templates_for('action') == ACTION_TEMPLATES[:1]
    assert templates_for('action', 'simple') == templates_for('entity', 'simple') == ('A video of {}.',)
    with pytest.raises(ConfigurationError):
        templates_for('action', 'fancy')


@given(st.sampled_from(ENTITY_TEMPLATES + ACTION_TEMPLATES), st.from_regex(r'[a-z]{1,12}', fullmatch=True))
def test_prompt_substitution_round_trip(template, word):
    prompt = instantiate_templates([word], 'entity', [template]).prompts[0]
    prefix, suffix = template.split('{}')
    assert prompt.startswith(prefix) and prompt.endswith(suffix)
    assert prefix + prompt[len(prefix):len(prompt) - len(suffix)] + suffix == prompt
    assert template.replace('{}', prompt[len(prefix):len(prompt) - len(suffix)]) == prompt


def test_prompt_set_file_round_trip(tmp_path):
    prompts = instantiate_templates(['run', 'jump'], 'action', templates_for('action', 'complex'))
    store_prompt_set(prompts, tmp_path / 'prompts.jsonl')
    assert load_prompt_set(tmp_path / 'prompts.jsonl') == prompts


def test_prompt_set_file_rejects_gaps(tmp_path):
    path = tmp_path / 'prompts.jsonl'
    path.write_text('{"kind": "action", "word": "run", "prompt": "run", "index": 1}\n', encoding='utf-8')
    with pytest.raises(FormatError):
        load_prompt_set(path)


def test_convert_mc_format(vocabulary):
    sequence = convert_mc('why did the boy cry', 'he fell down', vocabulary)
    assert sequence.ids[0] == CLS
    assert words(sequence, vocabulary) == ['[CLS]', 'why', 'did', 'the', 'boy', 'cry', '[PAD]', 'he', 'fell', 'down']


def test_convert_mc_empty_candidate(vocabulary):
    assert convert_mc('q', '', vocabulary).ids == (CLS, vocabulary.id('q'), PAD)


def test_convert_mc_batch_shares_prefix(vocabulary):
    sequences = convert_mc_batch('why did the boy cry', ['he', 'fell', 'down', 'run', 'q'], vocabulary)
    assert len(sequences) == 5
    prefix = convert_oe('why did the boy cry', vocabulary).ids + (PAD,)
    assert all(s.ids[:len(prefix)] == prefix for s in sequences)
    assert len({s.ids[len(prefix):] for s in sequences}) == 5


def test_convert_oe(vocabulary):
    assert words(convert_oe('what is the man doing', vocabulary), vocabulary) == \
        ['[CLS]', 'what', 'is', 'the', 'man', 'doing']
    assert convert_oe('q', vocabulary).ids == (CLS, vocabulary.id('q'))
    assert convert_oe('q', vocabulary).ids == convert_mc('q', '', vocabulary).ids[:-1]


def test_convert_rejects_empty_question(vocabulary):
    with pytest.raises(ArgumentError):
        convert_oe('  ', vocabulary)

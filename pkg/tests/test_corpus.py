"""Corpus: vocabulary, tokenization, chunking, windows, synthetic generation."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delm import corpus as C


class TestVocab:
    def test_frequency_then_lexicographic_order(self):
        # "b" twice, "a"/"c" once: hand-counted frequencies
        vocab = C.build_vocab(["a b", "b c"])
        assert vocab.id_of("b") == 4
        assert vocab.id_of("a") == 5
        assert vocab.id_of("c") == 6

    def test_empty_corpus_errors(self):
        with pytest.raises(C.CorpusError):
            C.build_vocab([])
        with pytest.raises(C.CorpusError):
            C.build_vocab([""])

    def test_deterministic(self):
        texts = ["the cat sat", "the dog ran", "cat and dog"]
        assert C.build_vocab(texts) == C.build_vocab(texts)

    def test_special_ids(self):
        vocab = C.build_vocab(["x"])
        assert (C.PAD_ID, C.BOS_ID, C.EOS_ID, C.UNK_ID) == (0, 1, 2, 3)
        assert vocab.id_of("x") == C.FIRST_REGULAR_ID

    def test_save_load_roundtrip(self, tmp_path):
        vocab = C.build_vocab(["alpha beta gamma, delta!"])
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        # line number = id - 4
        lines = path.read_text().splitlines()
        assert lines[vocab.id_of("alpha") - 4] == "alpha"
        assert C.Vocabulary.load(path) == vocab


class TestTokenize:
    def test_direct_lookup(self):
        vocab = C.build_vocab(["a b"])
        assert C.tokenize(vocab, "a b").tolist() == [vocab.id_of("a"), vocab.id_of("b")]

    def test_unknown_tokens_per_piece(self):
        vocab = C.build_vocab(["known words"])
        # the split rule makes "-" its own token: three UNK pieces
        assert C.tokenize(vocab, "zzz-unseen").tolist() == [C.UNK_ID] * 3

    def test_empty_text(self):
        vocab = C.build_vocab(["a"])
        assert C.tokenize(vocab, "").tolist() == []

    def test_never_emits_pad(self):
        vocab = C.build_vocab(["some text with, punctuation!"])
        ids = C.tokenize(vocab, "some text with, punctuation!")
        assert (ids != C.PAD_ID).all()

    @given(st.text(alphabet="abc XY.,!", max_size=60))
    @settings(max_examples=200, deadline=None)
    def test_roundtrip_equals_normalized(self, text):
        vocab = C.build_vocab(["abc a ab b bc c x y . , !"])
        ids = C.tokenize(vocab, text)
        if C.UNK_ID not in ids:
            assert C.detokenize(vocab, ids) == C.normalize_text(text)


class TestChunkArticle:
    def test_130_tokens_three_chunks(self):
        # 130 tokens, s=64, n=448: targets 64/64/2, inputs 0/64/128 of content
        tokens = np.arange(4, 134)
        chunks = C.chunk_article(tokens, s=64, n=448)
        assert len(chunks) == 3
        target_lens = [int((c.target_y != 0).sum()) for c in chunks]
        input_lens = [int((c.input_x != 0).sum()) for c in chunks]
        assert target_lens == [64, 64, 2]
        assert input_lens == [0, 64, 128]
        for c in chunks:
            assert len(c.input_x) == 448 and len(c.target_y) == 64

    def test_single_block_all_pad_input(self):
        chunks = C.chunk_article(np.arange(4, 68), s=64, n=448)
        assert len(chunks) == 1
        assert (chunks[0].input_x == 0).all()

    def test_empty_article(self):
        assert C.chunk_article(np.array([], dtype=np.int64)) == []

    def test_input_is_left_padded(self):
        chunks = C.chunk_article(np.arange(4, 134), s=64, n=448)
        x = chunks[1].input_x
        assert (x[:-64] == 0).all() and (x[-64:] != 0).all()

    @given(st.integers(min_value=1, max_value=300), st.integers(min_value=1, max_value=70))
    @settings(max_examples=60, deadline=None)
    def test_tiling_property(self, n_tokens, s):
        tokens = np.arange(4, 4 + n_tokens)
        chunks = C.chunk_article(tokens, s=s, n=17)
        rebuilt = np.concatenate([c.target_y[c.target_y != 0] for c in chunks])
        assert rebuilt.tolist() == tokens.tolist()
        assert [c.chunk_index for c in chunks] == list(range(len(chunks)))


class TestContextWindows:
    def test_130_tokens_three_windows(self):
        wins = C.build_context_windows(np.arange(4, 134), w=512, stride=64)
        assert [w.start_offset for w in wins] == [0, 64, 128]

    def test_512_tokens_eight_windows(self):
        wins = C.build_context_windows(np.arange(4, 516), w=512, stride=64)
        assert len(wins) == 8
        assert [w.start_offset for w in wins] == list(range(0, 512, 64))

    def test_single_token(self):
        wins = C.build_context_windows(np.array([9]), w=512, stride=64)
        assert len(wins) == 1
        assert int((wins[0].tokens != 0).sum()) == 1
        assert len(wins[0].tokens) == 512

    @given(st.integers(min_value=1, max_value=400))
    @settings(max_examples=60, deadline=None)
    def test_coverage_property(self, n_tokens):
        tokens = np.arange(4, 4 + n_tokens)
        wins = C.build_context_windows(tokens, w=96, stride=32)
        covered = set()
        for w in wins:
            assert w.start_offset % 32 == 0
            covered.update(range(w.start_offset,
                                 w.start_offset + int((w.tokens != 0).sum())))
        assert covered == set(range(n_tokens))


class TestSyntheticCorpus:
    def test_determinism(self):
        a1, q1 = C.gen_synthetic_corpus(1, 3, 2, 4)
        a2, q2 = C.gen_synthetic_corpus(1, 3, 2, 4)
        assert [x.text for x in a1] == [x.text for x in a2]
        assert [x.answer for x in q1] == [x.answer for x in q2]

    def test_qa_cross_product(self):
        _, qa = C.gen_synthetic_corpus(1, 2, 2, 1)
        assert len(qa) == 4

    def test_heldout_values_not_in_training_targets(self):
        # exhaustive scan: held-out values appear only in their own articles
        articles, qa = C.gen_synthetic_corpus(5, 6, 3, 8)
        heldout_values = {q.answer for q in qa if q.heldout}
        assert heldout_values
        for a in articles:
            if a.heldout:
                continue
            for v in heldout_values:
                assert v not in a.text.split()

    def test_heldout_flag_consistency(self):
        articles, qa = C.gen_synthetic_corpus(2, 2, 2, 3, heldout_fraction=0.25)
        held_articles = {a.fact_id for a in articles if a.heldout}
        held_qa = {q.gold_fact_id for q in qa if q.heldout}
        assert held_articles == held_qa
        assert len(held_qa) == 1  # ceil(0.25 * 4)

    def test_values_unique(self):
        _, qa = C.gen_synthetic_corpus(3, 4, 2, 2)
        values = [q.answer for q in qa]
        assert len(values) == len(set(values))

    def test_fact_articles_are_seven_tokens(self):
        articles, _ = C.gen_synthetic_corpus(2, 2, 2, 1)
        vocab = C.build_vocab([a.text for a in articles])
        for a in articles:
            if a.fact_id >= 0:
                assert len(C.tokenize(vocab, a.text)) == 7

    def test_context_pool_has_alternatives(self):
        articles, qa = C.gen_synthetic_corpus(4, 4, 4, 3)
        for q in qa:
            assert q.context_pool[0] == q.gold_fact_id
            assert len(q.context_pool) > 4


class TestQAFormatting:
    @pytest.fixture
    def vocab(self):
        articles, qa = C.gen_synthetic_corpus(2, 2, 2, 2)
        return C.build_vocab([a.text for a in articles] + [q.question for q in qa]
                             + [q.answer for q in qa]
                             + ["question : answer : title : source : what is of who x T S long t"])

    def test_prompt_format(self, vocab):
        q = C.QAExample(question="who", answer="x")
        prompt, target = C.format_qa(vocab, q)
        assert C.detokenize(vocab, prompt) == C.normalize_text("question: who \n answer:")
        assert target[-1] == C.EOS_ID
        assert C.detokenize(vocab, target[:-1]) == "x" or target[0] == C.UNK_ID

    def test_context_format_padded(self, vocab):
        ctx = C.format_qa_context(vocab, "T", "S", length=8)
        assert len(ctx) == 8
        text = C.detokenize(vocab, ctx)
        assert text.startswith("title :")
        assert "source :" in text

    def test_context_trimmed(self, vocab):
        ctx = C.format_qa_context(vocab, "t", "long " * 50, length=8)
        assert len(ctx) == 8

    def test_empty_answer_in_training_mode(self, vocab):
        with pytest.raises(C.CorpusError):
            C.format_qa(vocab, C.QAExample(question="who", answer=" "))

    def test_eval_mode_empty_target(self, vocab):
        prompt, target = C.format_qa(vocab, C.QAExample(question="who", answer=""),
                                     answer_included=False)
        assert len(target) == 0 and len(prompt) > 0

    def test_short_answer_rule(self):
        assert C.qa_answer_is_short("one two three four five")
        assert not C.qa_answer_is_short("one two three four five six")
        assert not C.qa_answer_is_short("")


class TestSquadNormalize:
    def test_articles_punct_case(self):
        assert C.squad_normalize("The  Answer!") == "answer"
        assert C.squad_normalize("a dog's day") == "dog s day"

    def test_idempotent(self):
        s = C.squad_normalize("An Example, truly.")
        assert C.squad_normalize(s) == s


class TestFiles:
    def test_corpus_jsonl_roundtrip(self, tmp_path):
        articles, _ = C.gen_synthetic_corpus(2, 2, 2, 2)
        path = tmp_path / "corpus.jsonl"
        C.save_corpus(path, articles)
        with open(path) as f:
            first = json.loads(f.readline())
        assert set(first) >= {"id", "text", "title"}
        loaded = C.load_corpus(path)
        assert [a.text for a in loaded] == [a.text for a in articles]
        assert [a.heldout for a in loaded] == [a.heldout for a in articles]

    def test_qa_jsonl_roundtrip(self, tmp_path):
        _, qa = C.gen_synthetic_corpus(2, 2, 2, 2)
        path = tmp_path / "qa.jsonl"
        C.save_qa(path, qa)
        with open(path) as f:
            first = json.loads(f.readline())
        assert set(first) >= {"question", "answer", "heldout"}
        loaded = C.load_qa(path)
        assert [q.answer for q in loaded] == [q.answer for q in qa]

import json

import numpy as np
import pytest

from bcqlm.data import (
    ANSWERS,
    SceneGraph,
    SceneObject,
    Vocab,
    answer_question,
    build_vocab,
    detokenize,
    encode_dialogue,
    export_dataset,
    load_exported,
    preprocess_image,
    render_caption,
    synth_dataset,
    tokenize,
)
from bcqlm.errors import GraphError, ImageFormatError, VocabError


def book_desk():
    return SceneGraph([SceneObject(0, "book", ["red"]), SceneObject(1, "desk")], [(0, "on", 1)])


class TestCaptions:
    def test_relation_clause(self):
        assert render_caption(book_desk()) == "the red book is on the desk"

    def test_single_node(self):
        assert render_caption(SceneGraph([SceneObject(3, "dog")], [])) == "the dog"

    def test_object_order_irrelevant(self):
        g = book_desk()
        flipped = SceneGraph(list(reversed(g.objects)), list(g.relations))
        assert render_caption(flipped) == render_caption(g)

    def test_unrelated_objects_follow_relations(self):
        g = SceneGraph(
            [SceneObject(2, "lamp", ["tall"]), SceneObject(0, "book", ["red"]), SceneObject(1, "desk")],
            [(0, "on", 1)],
        )
        assert render_caption(g) == "the red book is on the desk; the tall lamp"

    def test_dangling_relation(self):
        with pytest.raises(GraphError):
            render_caption(SceneGraph([SceneObject(0, "book")], [(0, "on", 5)]))

    def test_json_round_trip(self):
        g = book_desk()
        assert render_caption(SceneGraph.from_json(json.loads(json.dumps(g.to_json())))) == render_caption(g)


class TestSynth:
    def test_deterministic(self):
        a, b = synth_dataset(7, 4, 64), synth_dataset(7, 4, 64)
        for x, y in zip(a, b):
            assert (x.caption, x.question, x.answer) == (y.caption, y.question, y.answer)
            assert np.array_equal(x.pixels, y.pixels)

    def test_single_item(self):
        (item,) = synth_dataset(0, 1, 64)
        assert item.question and item.answer

    def test_answers_match_graph_oracle(self, items):
        for it in items:
            assert answer_question(it.graph, it.question) == it.answer
            assert it.answer in ANSWERS

    def test_both_question_kinds_present(self, items):
        kinds = {it.question.startswith("what color") for it in items}
        assert kinds == {True, False}
        assert {it.answer for it in items if not it.question.startswith("what")} == {"yes", "no"}

    def test_item_independent_of_dataset_size(self):
        assert synth_dataset(3, 5, 64)[4].caption == synth_dataset(3, 9, 64)[4].caption

    def test_pixels_show_object_colors(self, items):
        from bcqlm.data import COLORS

        it = items[0]
        for obj in it.graph.objects:
            color = np.array(COLORS[obj.attributes[0]])
            assert (np.abs(it.pixels.astype(int) - color).sum(-1) == 0).sum() > 20

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            synth_dataset(0, 0)

    def test_export_round_trip(self, tmp_path, tiny):
        data = synth_dataset(1, 3, tiny.image_resolution)
        export_dataset(data, tmp_path, tiny)
        rows, images = load_exported(tmp_path)
        assert [r["answer"] for r in rows] == [d.answer for d in data]
        assert images[data[0].item_id].shape == (3, tiny.image_resolution, tiny.image_resolution)
        assert (tmp_path / "images" / f"{data[0].item_id}.png").exists()


class TestTokenizer:
    def test_empty_string(self, vocab):
        seq = tokenize("", vocab, 8)
        assert seq.ids[:2] == [vocab.bos_id, vocab.eos_id]
        assert seq.ids[2:] == [vocab.pad_id] * 6
        assert sum(seq.attention_mask) == 2

    def test_three_words(self):
        v = build_vocab(["a red book"])
        assert sum(tokenize("a red book", v, 10).attention_mask) == 5

    def test_truncation(self, vocab):
        seq = tokenize(" ".join(["red"] * 200), vocab, 24)
        assert len(seq.ids) == 24
        assert seq.ids[-1] == vocab.eos_id
        assert all(seq.attention_mask)

    def test_unknown_word(self, vocab):
        assert tokenize("zebra", vocab, 5).ids[1] == vocab.unk_id

    def test_mask_prefix_and_pad(self, vocab):
        seq = tokenize("what color is the circle?", vocab, 12)
        k = sum(seq.attention_mask)
        assert seq.attention_mask == [1] * k + [0] * (12 - k)
        assert all(i == vocab.pad_id for i in seq.ids[k:])

    def test_detokenize_inverse(self, vocab):
        text = "is the red circle left of the blue square"
        assert detokenize(tokenize(text, vocab, 24).ids, vocab) == text

    def test_vocab_order(self):
        v = build_vocab(["b a", "a c", "a"])
        assert v.itos[4:] == ["a", "b", "c"]

    def test_vocab_json(self, vocab):
        assert Vocab.from_json(vocab.to_json()).itos == vocab.itos

    def test_empty_vocab(self):
        with pytest.raises(VocabError):
            Vocab([])

    def test_dialogue_response_mask(self, vocab):
        ids, attn, resp = encode_dialogue("what color is the circle?", "red", vocab, 12)
        assert sum(resp) == 2  # answer + EOS
        assert ids[attn.index(0) - 1] == vocab.eos_id
        assert [i for i, r in zip(ids, resp) if r] == [vocab.stoi["red"], vocab.eos_id]


class TestPreprocess:
    def test_constant_gray(self):
        raw = np.full((40, 30, 3), 127.5)
        out = preprocess_image(raw, 32)
        mean, std = np.array([0.481, 0.458, 0.408]), np.array([0.269, 0.261, 0.276])
        expected = (0.5 - mean) / std
        assert np.allclose(out, expected[:, None, None], atol=1e-6)

    def test_identity_resize(self):
        rng = np.random.default_rng(0)
        raw = rng.integers(0, 256, (32, 32, 3)).astype(np.float32)
        out = preprocess_image(raw, 32, mean=(0, 0, 0), std=(1, 1, 1))
        assert np.array_equal(out, (raw / 255.0).transpose(2, 0, 1).astype(np.float32))

    def test_non_rgb(self):
        with pytest.raises(ImageFormatError):
            preprocess_image(np.zeros((8, 8)), 8)
        with pytest.raises(ImageFormatError):
            preprocess_image(np.zeros((8, 8, 4)), 8)


def test_detokenize_rejects_out_of_range(vocab):
    from bcqlm.data import detokenize
    from bcqlm.errors import VocabError

    with pytest.raises(VocabError):
        detokenize([len(vocab)], vocab)

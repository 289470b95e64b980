import json

import numpy as np
import pytest

import storylm
from story_embedder.cli import main
from story_embedder.encoder import EncoderConfig, SentenceEncoder
from story_embedder.formats import ValidationError
from story_embedder.pipeline import embed_cloze_set, embed_corpus

STORIES = [
    ["the dog ran to the park .", "the dog was happy .",
     "a cat sat at home .", "the cat was sad .", "then the dog ran home ."],
    ["a small cat went to the park .", "the cat ran fast .",
     "the dog was happy .", "the big dog ran slow .", "she was very happy ."],
    ["he went home .", "it was a big home .", "the cat and the dog sat .",
     "then she ran to the park .", "the dog was happy ."],
]


def write_stories(tmp_path, stories=STORIES, name="stories.tsv"):
    path = tmp_path / name
    path.write_text("\n".join("\t".join(story) for story in stories) + "\n",
                    encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def encoder(tiny_bert):
    return SentenceEncoder(EncoderConfig(model=tiny_bert, batch_size=8))


def test_identical_sentences_identical_rows(tmp_path, tiny_bert, encoder):
    """Acceptance: 'the dog was happy .' appears in all three stories and
    must produce bitwise-identical rows everywhere it occurs."""
    out = tmp_path / "out"
    embed_corpus(write_stories(tmp_path), EncoderConfig(model=tiny_bert), out,
                 encoder=encoder)
    matrix = storylm.read_embeddings(out / "embeddings.slmb")
    flat = [s for story in STORIES for s in story]
    positions = [i for i, s in enumerate(flat) if s == "the dog was happy ."]
    assert len(positions) == 3
    for p in positions[1:]:
        assert np.array_equal(matrix.data[positions[0]], matrix.data[p])


def test_output_loads_through_store_with_dim_768(tmp_path, tiny_bert, encoder):
    """Acceptance: outputs load through the scorer's loader with zero
    validation errors and the base model's 768-dim rows."""
    out = tmp_path / "out"
    summary = embed_corpus(write_stories(tmp_path), EncoderConfig(model=tiny_bert),
                           out, encoder=encoder)
    matrix, corpus = storylm.load_corpus(out / "embeddings.slmb", out / "corpus.idx")
    assert matrix.dim == 768
    assert summary["dim"] == 768
    assert matrix.count == corpus.num_stories * corpus.sentences_per_story == 15
    assert corpus.context_len == 4
    pool = storylm.candidate_pool(corpus, 4)
    assert pool.size == 3


def test_story_order_shuffle_changes_no_row(tmp_path, tiny_bert, encoder):
    cfg = EncoderConfig(model=tiny_bert)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    embed_corpus(write_stories(tmp_path, STORIES, "s1.tsv"), cfg, out_a, encoder=encoder)
    shuffled = [STORIES[2], STORIES[0], STORIES[1]]
    embed_corpus(write_stories(tmp_path, shuffled, "s2.tsv"), cfg, out_b, encoder=encoder)
    ma = storylm.read_embeddings(out_a / "embeddings.slmb")
    mb = storylm.read_embeddings(out_b / "embeddings.slmb")
    by_text_a = {s: ma.data[i] for i, s in enumerate(s for st in STORIES for s in st)}
    for i, s in enumerate(s for st in shuffled for s in st):
        assert np.array_equal(by_text_a[s], mb.data[i]), s


def test_rerun_rows_stable(tmp_path, tiny_bert):
    cfg = EncoderConfig(model=tiny_bert)
    rows = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        embed_corpus(write_stories(tmp_path, STORIES, f"{name}.tsv"), cfg, out,
                     encoder=SentenceEncoder(cfg))
        rows.append(storylm.read_embeddings(out / "embeddings.slmb").data)
    assert np.allclose(rows[0], rows[1], atol=1e-5)


def test_neighbor_independence_within_tolerance(tmp_path, tiny_bert, encoder):
    """Adding a story reshapes batches; shared sentences stay equal to 1e-5."""
    cfg = EncoderConfig(model=tiny_bert)
    out_a = tmp_path / "na"
    out_b = tmp_path / "nb"
    embed_corpus(write_stories(tmp_path, STORIES, "n1.tsv"), cfg, out_a, encoder=encoder)
    extra = STORIES + [["she sat .", "he sat .", "it sat .", "the dog sat .",
                        "the cat sat ."]]
    embed_corpus(write_stories(tmp_path, extra, "n2.tsv"), cfg, out_b, encoder=encoder)
    ma = storylm.read_embeddings(out_a / "embeddings.slmb")
    mb = storylm.read_embeddings(out_b / "embeddings.slmb")
    assert np.allclose(ma.data, mb.data[:ma.count], atol=1e-5)


def test_cloze_pipeline_shapes_and_labels(tmp_path, tiny_bert, encoder):
    item = "\t".join(["the dog ran .", "the dog sat .", "the cat ran .",
                      "the cat sat .", "she was happy .", "he was sad .", "b"])
    path = tmp_path / "labeled.tsv"
    path.write_text(item + "\n", encoding="utf-8")
    out = tmp_path / "cloze_out"
    summary = embed_cloze_set(path, EncoderConfig(model=tiny_bert), out,
                              encoder=encoder)
    assert summary["items"] == 1 and summary["sentences"] == 6
    matrix = storylm.read_embeddings(out / "embeddings.slmb")
    assert matrix.count == 6
    cloze = storylm.read_cloze(out / "cloze.tsv")
    storylm.store.validate_cloze(cloze, matrix.count)
    assert cloze.context_len == 4
    assert cloze.labels[0] == 1  # "b" preserved verbatim
    line = (out / "cloze.tsv").read_text().strip()
    assert line.endswith("\tb")


def test_empty_sentence_rejected(tmp_path, tiny_bert):
    path = tmp_path / "bad.tsv"
    path.write_text("the dog ran .\t\tthe cat sat .\ta\tb\n", encoding="utf-8")
    with pytest.raises(ValidationError, match="empty sentence"):
        embed_corpus(path, EncoderConfig(model=tiny_bert), tmp_path / "o")


def test_ragged_story_rejected(tmp_path, tiny_bert):
    path = tmp_path / "bad.tsv"
    path.write_text("a .\tb .\tc .\n a .\tb .\n".replace(" a", "a"), encoding="utf-8")
    with pytest.raises(ValidationError, match=":2"):
        embed_corpus(path, EncoderConfig(model=tiny_bert), tmp_path / "o")


def test_truncation_counted(tmp_path, tiny_bert):
    long_sentence = " ".join(["the dog ran"] * 40) + " ."
    stories = [[long_sentence, "the cat sat .", "he went home .",
                "she was happy .", "it was big ."]]
    out = tmp_path / "trunc"
    summary = embed_corpus(write_stories(tmp_path, stories, "t.tsv"),
                           EncoderConfig(model=tiny_bert, max_length=16), out,
                           encoder=SentenceEncoder(
                               EncoderConfig(model=tiny_bert, max_length=16)))
    assert summary["truncated"] == 1
    matrix = storylm.read_embeddings(out / "embeddings.slmb")
    assert matrix.count == 5


def test_include_special_tokens_changes_rows(tmp_path, tiny_bert, encoder):
    special_cfg = EncoderConfig(model=tiny_bert, include_special_tokens=True)
    with_special = SentenceEncoder(special_cfg)
    sentence = ["the dog ran to the park ."]
    base = encoder.encode(sentence).rows
    alt = with_special.encode(sentence).rows
    assert not np.allclose(base, alt, atol=1e-5)


def test_cli_corpus_and_manifest(tmp_path, tiny_bert):
    stories = write_stories(tmp_path)
    out = tmp_path / "cli_out"
    rc = main(["corpus", "--input", str(stories), "--model", tiny_bert,
               "--out", str(out), "--batch-size", "8"])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["encoder"]["model"] == tiny_bert
    assert manifest["encoder"]["layer"] == -2
    assert manifest["encoder"]["include_special_tokens"] is False
    assert manifest["stories"] == 3
    sidecar = (out / "sentences.txt").read_text().splitlines()
    assert len(sidecar) == 15


def test_cli_cloze(tmp_path, tiny_bert):
    item = "\t".join(["the dog ran .", "the cat sat .", "she was happy .",
                      "he was sad .", "it was big .", "it was small .", "a"])
    path = tmp_path / "labeled.tsv"
    path.write_text(item + "\n", encoding="utf-8")
    out = tmp_path / "cli_cloze"
    rc = main(["cloze", "--input", str(path), "--model", tiny_bert,
               "--out", str(out)])
    assert rc == 0
    assert (out / "cloze.tsv").read_text().strip().endswith("\ta")


def test_cli_bad_input_exit_2(tmp_path, tiny_bert, capsys):
    path = tmp_path / "bad.tsv"
    path.write_text("only one field\n", encoding="utf-8")
    rc = main(["cloze", "--input", str(path), "--model", tiny_bert,
               "--out", str(tmp_path / "o")])
    assert rc == 2

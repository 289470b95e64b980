import pytest
from transformers import BertConfig, BertModel, BertTokenizer

VOCAB = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
    "the", "a", "dog", "cat", "ran", "sat", "home", "park", "was", "happy",
    "sad", "big", "small", "went", "to", "and", "then", "she", "he", "it",
    "very", "fast", "slow", "##s", "##ed", "##ing", ".", ",", "!",
]


@pytest.fixture(scope="session")
def tiny_bert(tmp_path_factory):
    """A local 768-wide masked LM so tests never download weights."""
    model_dir = tmp_path_factory.mktemp("tiny_bert")
    vocab_file = model_dir / "vocab.txt"
    vocab_file.write_text("\n".join(VOCAB) + "\n", encoding="utf-8")
    tokenizer = BertTokenizer(str(vocab_file), do_lower_case=True)
    tokenizer.save_pretrained(model_dir)
    config = BertConfig(vocab_size=len(VOCAB), hidden_size=768,
                        num_hidden_layers=2, num_attention_heads=12,
                        intermediate_size=256, max_position_embeddings=64)
    BertModel(config).save_pretrained(model_dir)
    return str(model_dir)

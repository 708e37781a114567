from __future__ import annotations

import sys
from pathlib import Path

import pytest

SRC = Path(__file__).resolve().parents[1] / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from analysis.idiom_dataset import IdiomSample, build_prompt, split_idiom  # noqa: E402
from engine.checkpoint_io import CheckpointBundle, ModelConfig, random_checkpoint, write_checkpoint  # noqa: E402
from engine.model_runtime import forward  # noqa: E402
from engine.tensor_ops import argmax  # noqa: E402
from engine.tokenizer import BpeTokenizer, bytes_to_unicode, write_vocab  # noqa: E402

# ranked merges on top of the 256 byte tokens; " words" is one token, " helpful" is two
TINY_MERGES = (
    ("Ġ", "w"),
    ("o", "r"),
    ("Ġw", "or"),
    ("d", "s"),
    ("Ġwor", "ds"),
    ("Ġ", "h"),
    ("e", "l"),
    ("Ġh", "el"),
    ("Ġhel", "p"),
    ("f", "u"),
    ("fu", "l"),
)
WORDS_ID = 260
HELP_ID = 264
FUL_ID = 266

IDIOMS = (
    "Actions speak louder than words",
    "Mind your own words",
    "Keep your friends close",
    "Practice what you preach",
    "Read between the lines",
)


def tiny_tokenizer() -> BpeTokenizer:
    encoder = bytes_to_unicode()
    token_to_id = {encoder[b]: b for b in range(256)}
    for a, b in TINY_MERGES:
        token_to_id.setdefault(a + b, len(token_to_id))
    return BpeTokenizer(token_to_id, TINY_MERGES)


@pytest.fixture(autouse=True)
def app_home(tmp_path_factory: pytest.TempPathFactory, monkeypatch: pytest.MonkeyPatch) -> Path:
    home = tmp_path_factory.mktemp("lens-home")
    monkeypatch.setenv("LENS_HARNESS_HOME", str(home))
    return home


@pytest.fixture
def tokenizer() -> BpeTokenizer:
    return tiny_tokenizer()


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return ModelConfig(n_layer=2, n_head=2, n_embd=8, vocab_size=16, n_ctx=64)


@pytest.fixture(scope="session")
def tiny_bundle(tiny_config: ModelConfig) -> CheckpointBundle:
    return random_checkpoint(tiny_config, seed=7)


@pytest.fixture(scope="session")
def text_bundle() -> CheckpointBundle:
    config = ModelConfig(n_layer=2, n_head=2, n_embd=8, vocab_size=267, n_ctx=512)
    return random_checkpoint(config, seed=11)


@pytest.fixture
def model_dir(tmp_path: Path, text_bundle: CheckpointBundle) -> Path:
    target = tmp_path / "model"
    write_checkpoint(text_bundle, target)
    write_vocab(tiny_tokenizer(), target)
    return target


@pytest.fixture
def idiom_file(tmp_path: Path) -> Path:
    path = tmp_path / "idioms.txt"
    path.write_text("\n".join(IDIOMS) + "\n", encoding="utf-8")
    return path


def make_samples(
    bundle: CheckpointBundle,
    tokenizer: BpeTokenizer,
    correct_every: int = 2,
    instruction: str = "Complete the idiom:",
) -> list[IdiomSample]:
    """Samples whose gold token is the model's own prediction for every ``correct_every``-th prompt."""
    samples = []
    for index, idiom in enumerate(IDIOMS * 2):
        head, tail = split_idiom(idiom)
        prompt = build_prompt(instruction, head + " " * (index // len(IDIOMS)))
        predicted = argmax(forward(bundle, tokenizer.encode(prompt)).logits)
        gold = predicted if index % correct_every == 0 else (predicted + 1) % bundle.config.vocab_size
        samples.append(IdiomSample(idiom, prompt, tail, gold, index))
    return samples

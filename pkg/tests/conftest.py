import numpy as np
import pytest

from prefixvqa.lm import ModelConfig, init_model
from prefixvqa.tensor import Tensor


@pytest.fixture
def tiny_cfg():
    return ModelConfig(n_layers=2, n_heads=2, embed_dim=8, vocab_size=16, max_positions=32, seed=7)


@pytest.fixture
def tiny_model(tiny_cfg):
    return init_model(tiny_cfg)


def randomize(params, seed=0, scale=0.5):
    """Replace parameter values with larger random draws so gradients are not tiny."""
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.data = rng.uniform(-scale, scale, size=p.shape)


def embed(model, ids):
    return model.embed_tokens(np.asarray(ids))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class World:
    """A small synthetic dataset with its tokenizer and length budget."""

    def __init__(self, n_scenes=20, seed=3):
        from prefixvqa.data import SyntheticWorldConfig, pretraining_corpus, synth_generate
        from prefixvqa.prompt import LengthBudget, build_vocab

        self.cfg = SyntheticWorldConfig(n_scenes=n_scenes, seed=seed)
        self.manifest, self.features = synth_generate(self.cfg)
        train = self.manifest.splits["train"]
        self.tok = build_vocab(pretraining_corpus(self.cfg) + [s.question for s in train] + [s.answer for s in train])
        self.budget = LengthBudget.from_texts(self.tok, [s.question for s in train], [s.answer for s in train])

    def split(self, name, template="regular", prefix_len=4, mode="train"):
        from prefixvqa.train import encode_split

        return encode_split(self.tok, self.manifest.splits[name], self.features, self.budget, template,
                            prefix_len, mode)

    def model(self, variant="frozen", embed_dim=8, seed=0, base_scale=None, **peft):
        from prefixvqa.lm import ModelConfig, init_model
        from prefixvqa.mapper import MapperConfig, init_mapper
        from prefixvqa.peft import PeftConfig, attach_adapter

        base = init_model(ModelConfig(n_layers=1, n_heads=2, embed_dim=embed_dim, vocab_size=len(self.tok),
                                      max_positions=48, seed=seed))
        if base_scale is not None:
            # a random 0.02-scale tied head cannot produce confident logits; widen the matrices
            rng = np.random.default_rng(seed + 100)
            for name, p in base.params.items():
                if not name.endswith((".g", ".b")):
                    p.data = rng.normal(0.0, base_scale, p.shape)
        opts = {"n_virtual": 2, "prefix_len": 2, "rank": 2, **peft}
        adapted = attach_adapter(base, PeftConfig(variant, seed=seed, **opts))
        mapper = init_mapper(MapperConfig(embed_dim=embed_dim, prefix_len=4, seed=seed))
        return adapted, mapper


@pytest.fixture(scope="session")
def world():
    return World()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; all lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(criterion, ok, detail):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        return ok

    return record


_VERDICTS = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

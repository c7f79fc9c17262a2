"""Named model configurations and the train/evaluate plumbing shared by the CLI and tests."""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass, replace

from .data import SynthConfig, concat_longform, corpus_wer, synth_generate
from .errors import InvalidConfigError
from .training import make_optimizer, train
from .transducer import ModelConfig, build_model, greedy_decode

PRESETS = ("baseline", "rnnt-e", "rnnt-d")
NUM_LAYERS = 2
TEST_START = 1_000_000


def encoder_decoder_kinds(name: str):
    """Layer kinds (encoder, decoder) for a named configuration.

    ``progressive-K`` keeps the prediction network random and makes the top
    ``K`` of the encoder layers reservoirs, so K=2 randomises everything and
    K=0 equals ``rnnt-d``.
    """
    if name == "baseline":
        return ["lstm"] * NUM_LAYERS, ["lstm"] * NUM_LAYERS
    if name == "rnnt-e":
        return ["esn"] * NUM_LAYERS, ["lstm"] * NUM_LAYERS
    if name == "rnnt-d":
        return ["lstm"] * NUM_LAYERS, ["esn"] * NUM_LAYERS
    m = re.fullmatch(r"progressive-(\d+)", name)
    if m:
        k = int(m.group(1))
        if k > NUM_LAYERS:
            raise InvalidConfigError(f"progressive-K needs 0 <= K <= {NUM_LAYERS}")
        return ["lstm"] * (NUM_LAYERS - k) + ["esn"] * k, ["esn"] * NUM_LAYERS
    raise InvalidConfigError(
        f"unknown configuration {name!r}; expected baseline, rnnt-e, rnnt-d or progressive-K")


@dataclass(frozen=True)
class ExperimentConfig:
    config: str = "baseline"
    seed: int = 0
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-3
    optimizer: str = "adam"
    enc_dim: int = 64
    dec_dim: int = 64
    joint_dim: int = 64
    subsample: int = 2
    vocab: int = 16
    feature_dim: int = 16
    frames_per_token: int = 3
    noise_sigma: float = 0.3
    embedding_scale: float = 0.3
    min_label_len: int = 3
    max_label_len: int = 8
    train_size: int = 5000
    test_size: int = 500
    data_seed: int = 1234
    longform_k: int = 10
    longform_n: int = 50

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def model_config(self) -> ModelConfig:
        enc, dec = encoder_decoder_kinds(self.config)
        return ModelConfig(
            feature_dim=self.feature_dim,
            encoder_layers=[(k, self.enc_dim) for k in enc],
            decoder_layers=[(k, self.dec_dim) for k in dec],
            joint_dim=self.joint_dim, vocab_size=self.vocab,
            subsample_factor=self.subsample, master_seed=self.seed)

    def synth_config(self, split: str = "train") -> SynthConfig:
        base = SynthConfig(vocab_size=self.vocab, feature_dim=self.feature_dim,
                           frames_per_token=self.frames_per_token, noise_sigma=self.noise_sigma,
                           embedding_scale=self.embedding_scale,
                           min_label_len=self.min_label_len, max_label_len=self.max_label_len,
                           num_examples=self.train_size, seed=self.data_seed)
        if split == "train":
            return base
        if split == "test":
            return replace(base, num_examples=self.test_size, start_index=TEST_START)
        raise InvalidConfigError(f"unknown split {split!r}")


def train_dataset(exp: ExperimentConfig) -> list:
    return synth_generate(exp.synth_config("train"))


def test_dataset(exp: ExperimentConfig) -> list:
    return synth_generate(exp.synth_config("test"))


def longform_dataset(exp: ExperimentConfig, test=None) -> list:
    test = test_dataset(exp) if test is None else test
    return concat_longform(test, exp.longform_n, exp.longform_k, seed=exp.data_seed + 1)


def run_training(exp: ExperimentConfig, dataset=None, on_step=None):
    """Build and train the model described by ``exp``; returns (model, report)."""
    dataset = train_dataset(exp) if dataset is None else dataset
    model = build_model(exp.model_config())
    opt = make_optimizer(model, exp.optimizer, exp.lr)
    report = train(model, dataset, exp.steps, exp.batch_size, opt, seed=exp.seed, on_step=on_step)
    return model, report


def evaluate(model, dataset, max_symbols_per_frame: int = 4) -> dict:
    hyps = [greedy_decode(model, u.frames, max_symbols_per_frame) for u in dataset]
    result = corpus_wer((u.labels, h) for u, h in zip(dataset, hyps))
    return {"wer": result.rate, "substitutions": result.substitutions,
            "insertions": result.insertions, "deletions": result.deletions,
            "utterances": len(dataset),
            "reference_tokens": int(sum(len(u.labels) for u in dataset))}

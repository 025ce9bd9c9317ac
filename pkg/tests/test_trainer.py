import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from aboots.services import trainer
from aboots.services.config import TrainingConfig, load_config
from aboots.services.corpus import EOS, DialogueExample, collate, make_batches
from aboots.services.model import HredModel
from aboots.services.objectives import SampleKind, SpecialCase, generator_target_word
from aboots.services.parameters import Group, clip_gradients
from aboots.services.policy import Strategy
from aboots.services.utils import (
    CheckpointError,
    ConfigurationError,
    NonFiniteLossError,
    make_rng,
)


def _setup(config, data_dir):
    dataset = trainer.dataset_for(config, data_dir)
    model = HredModel.initialize(
        len(dataset.vocab), config.hidden, config.layers, make_rng(config.seed, trainer.INIT_STREAM)
    )
    return model, dataset


def _first_batch(config, dataset):
    return next(iter(_batches(config, dataset)))


def _batches(config, dataset):
    return make_batches(dataset.train, config.batch_size, config.max_lens, make_rng(config.seed, 0))


class TestLearningRate:
    def test_two_increases_decay(self):
        assert trainer.lr_schedule([1.0, 1.1, 1.2], 0.5, 0.99) == pytest.approx(0.495)

    def test_decrease_keeps_rate(self):
        assert trainer.lr_schedule([1.0, 0.9], 0.5, 0.99) == 0.5
        assert trainer.lr_schedule([1.0, 1.1, 1.05], 0.5, 0.99) == 0.5

    def test_decay_range(self):
        with pytest.raises(ConfigurationError):
            trainer.lr_schedule([1.0, 2.0, 3.0], 0.5, 1.0)


class TestTrainStep:
    def test_mle_leaves_discriminator_untouched(self, tiny_config, toy_data_dir):
        config = tiny_config.replace(special_case=SpecialCase.MLE)
        model, dataset = _setup(config, toy_data_dir)
        batch = _first_batch(config, dataset)
        before = model.parameters.snapshot()

        expected = np.mean(
            [
                trainer.training_nll(model, [example], config) * len(example.target)
                for example in batch.examples()
            ]
        )
        result = trainer.train_step(model, batch, config, 0.5, step=0)

        assert result.generator_loss == pytest.approx(expected, rel=1e-12)
        assert result.discriminator_loss == 0.0
        assert result.diagnostics["disc_samples"] == 0.0
        for name in model.parameters.names_in(Group.DISCRIMINATOR):
            assert_array_equal(model.parameters[name], before[name])
        assert not np.array_equal(model.parameters["decoder.0.w"], before["decoder.0.w"])

    def test_hard_bootstrap_with_beta_one_matches_mle(self, tiny_config, toy_data_dir):
        results = []
        for case in (SpecialCase.MLE, SpecialCase.HARD):
            config = tiny_config.replace(special_case=case, beta=1.0)
            model, dataset = _setup(config, toy_data_dir)
            results.append(trainer.train_step(model, _first_batch(config, dataset), config, 0.5, 0))
            results.append(model.parameters.snapshot())
        assert results[0].generator_loss == results[2].generator_loss
        for name, value in results[1].items():
            assert_array_equal(results[3][name], value)

    @pytest.mark.parametrize("bootstrap,count", [(True, 4.0), (False, 3.0)])
    def test_discriminator_sample_count(self, tiny_config, toy_data_dir, bootstrap, count):
        config = tiny_config.replace(disc_bootstrap=bootstrap)
        model, dataset = _setup(config, toy_data_dir)
        result = trainer.train_step(model, _first_batch(config, dataset), config, 0.5, 0)
        assert result.diagnostics["disc_samples"] == count
        assert ("soft_label" in result.diagnostics) is bootstrap
        assert math.isfinite(result.discriminator_loss)

    @pytest.mark.parametrize("strategy", list(Strategy))
    def test_each_network_moves_only_by_its_own_loss(self, tiny_config, toy_data_dir, strategy):
        config = tiny_config.replace(strategy=strategy)
        model, dataset = _setup(config, toy_data_dir)
        batch = _first_batch(config, dataset)
        parameters = model.parameters
        before = parameters.snapshot()
        generator = parameters.names_in(Group.GENERATOR)
        discriminator = parameters.names_in(Group.DISCRIMINATOR)

        gen_grads = {name: np.zeros_like(parameters[name]) for name in generator}
        disc_grads = {name: np.zeros_like(parameters[name]) for name in discriminator}
        leaked = False
        examples = batch.examples()
        for row, example in enumerate(examples):
            losses = trainer.example_losses(model, example, config, make_rng(config.seed, trainer.TRAIN_STREAM, 5, row))
            grads = losses.graph.backward(losses.generator)
            for name in generator:
                gen_grads[name] += grads[name] / len(examples)
            grads = losses.graph.backward(losses.discriminator)
            leaked = leaked or any(grads[name].any() for name in generator if name.startswith("encoder."))
            for name in discriminator:
                disc_grads[name] += grads[name] / len(examples)
        assert leaked, "discriminator loss should reach the encoder before group filtering"

        trainer.train_step(model, batch, config, 0.5, step=5)
        gen_grads = clip_gradients(gen_grads, config.clip)
        disc_grads = clip_gradients(disc_grads, config.clip)
        for name in generator:
            assert_allclose(parameters[name], before[name] - 0.5 * gen_grads[name], atol=1e-12)
        for name in discriminator:
            assert_allclose(parameters[name], before[name] - 0.5 * disc_grads[name], atol=1e-12)

    def test_non_finite_loss(self, tiny_config, toy_data_dir):
        config = tiny_config.replace(special_case=SpecialCase.MLE)
        model, dataset = _setup(config, toy_data_dir)
        model.parameters["output_bias"][...] = np.nan
        before = model.parameters.snapshot()
        with pytest.raises(NonFiniteLossError) as raised:
            trainer.train_step(model, _first_batch(config, dataset), config, 0.5, step=3)
        assert raised.value.diagnostics["step"] == 3.0
        assert_array_equal(model.parameters["embedding"], before["embedding"])

    def test_memorizes_one_example(self):
        config = _small_config(hidden=16, special_case=SpecialCase.MLE)
        example = DialogueExample(((4, 5, 6, EOS),), (7, 8, 9, EOS), (10, EOS))
        model = HredModel.initialize(12, 16, 1, make_rng(1))
        batch = collate([example], config.max_turn_len, config.max_turns)
        rate, history = config.learning_rate, []
        for step in range(500):
            result = trainer.train_step(model, batch, config, rate, step)
            history = (history + [result.generator_loss])[-3:]
            rate = trainer.lr_schedule(history, rate, config.lr_decay)
        assert trainer.training_nll(model, [example], config) < 0.1
        assert [tuple(tokens) for tokens in trainer.decode(model, [example], config)] == [example.target]


class TestExampleLosses:
    def test_one_encoding_feeds_generator_and_discriminator(self, tiny_model, tiny_example, tiny_config, monkeypatch):
        encodings, generated, judged = [], [], []
        encode, generate, discriminate = tiny_model.encode_context, tiny_model.generate_sequence, tiny_model.discriminate

        def recording_encode(graph, context):
            encodings.append(encode(graph, context))
            return encodings[-1]

        def recording_generate(graph, encoded, *args, **kwargs):
            generated.append(encoded)
            return generate(graph, encoded, *args, **kwargs)

        def recording_discriminate(graph, response, context_state, level):
            judged.append(context_state)
            return discriminate(graph, response, context_state, level)

        monkeypatch.setattr(tiny_model, "encode_context", recording_encode)
        monkeypatch.setattr(tiny_model, "generate_sequence", recording_generate)
        monkeypatch.setattr(tiny_model, "discriminate", recording_discriminate)
        trainer.example_losses(tiny_model, tiny_example, tiny_config, make_rng(0))

        assert len(encodings) == 1
        assert len(generated) == 2
        assert all(encoded is encodings[0] for encoded in generated)
        assert len(judged) == 4
        assert all(state is encodings[0].context_state for state in judged)


class TestWordRewards:
    """Greedy sampling makes the sample equal to the free-running argmax."""

    @pytest.fixture
    def rewards(self, monkeypatch):
        recorded = []
        reinforce_loss = trainer.reinforce_loss

        def recording_loss(log_probs, rewards):
            recorded.append(list(rewards))
            return reinforce_loss(log_probs, rewards)

        monkeypatch.setattr(trainer, "make_sampler", lambda strategy, k, rng: lambda d: int(np.argmax(d)))
        monkeypatch.setattr(trainer, "reinforce_loss", recording_loss)
        return recorded

    def _run(self, model, example, config, argmax):
        graph = model.new_graph()
        encoded = model.encode_context(graph, example.context)
        _, tokens, judgement = trainer._policy_terms(model, graph, encoded, example, argmax, config, make_rng(0))
        return tokens, judgement.scores.value

    def _expected(self, tokens, scores, example, argmax, config):
        hp = config.hyperparams
        expected = []
        for position, (token, score) in enumerate(zip(tokens, scores)):
            if position < len(example.target) and token == example.target[position]:
                kind = SampleKind.GROUND_TRUTH
            elif position < len(argmax) and token == argmax[position]:
                kind = SampleKind.TF_ARGMAX
            else:
                kind = SampleKind.POLICY_SAMPLE
            expected.append(generator_target_word(kind, float(score), hp))
        return expected

    def test_free_running_argmax_is_credited(self, rewards, tiny_model, tiny_example, tiny_config):
        tokens, scores = self._run(tiny_model, tiny_example, tiny_config, ())
        assert rewards == [self._expected(tokens, scores, tiny_example, (), tiny_config)]
        target = tiny_example.target
        for position, (token, reward) in enumerate(zip(tokens, rewards[0])):
            if position >= len(target) or token != target[position]:
                assert reward > 0

    def test_teacher_forcing_argmax_gets_no_credit(self, rewards, tiny_model, tiny_example, tiny_config):
        tokens, _ = self._run(tiny_model, tiny_example, tiny_config, ())
        rewards.clear()
        tokens, scores = self._run(tiny_model, tiny_example, tiny_config, tokens)
        assert rewards == [self._expected(tokens, scores, tiny_example, tokens, tiny_config)]
        for position, (token, reward) in enumerate(zip(tokens, rewards[0])):
            if position >= len(tiny_example.target) or token != tiny_example.target[position]:
                assert reward == 0.0


def _small_config(**changes):
    return TrainingConfig(layers=1, vocab_size=12, top_k=3, **changes)


class TestDecoding:
    def test_top_one_equals_greedy(self, tiny_config, toy_data_dir):
        model, dataset = _setup(tiny_config, toy_data_dir)
        examples = dataset.valid[:4]
        assert trainer.decode(model, examples, tiny_config, "topk", k=1) == trainer.decode(
            model, examples, tiny_config
        )

    def test_seeded_top_k_is_reproducible(self, tiny_config, toy_data_dir):
        model, dataset = _setup(tiny_config, toy_data_dir)
        first = trainer.decode(model, dataset.valid, tiny_config, "topk", k=5, seed=3)
        second = trainer.decode(model, dataset.valid, tiny_config, "topk", k=5, seed=3)
        assert first == second

    def test_unknown_mode(self, tiny_config, toy_data_dir):
        model, dataset = _setup(tiny_config, toy_data_dir)
        with pytest.raises(ConfigurationError):
            trainer.decode(model, dataset.valid, tiny_config, "beam")

    def test_search_top_k(self, tiny_config, toy_data_dir):
        model, dataset = _setup(tiny_config, toy_data_dir)
        search = trainer.search_top_k(model, dataset.vocab, dataset.valid, tiny_config, (1, 4))
        assert list(search.curve) == [1, 2, 3, 4]
        assert search.curve[1] == pytest.approx(trainer.greedy_bleu(model, dataset.vocab, dataset.valid, tiny_config))
        best = max(search.curve.values())
        assert search.best_k == min(k for k, value in search.curve.items() if value == best)
        again = trainer.search_top_k(model, dataset.vocab, dataset.valid, tiny_config, (1, 4))
        assert again.curve == search.curve

    def test_search_needs_examples(self, tiny_config, toy_data_dir):
        model, dataset = _setup(tiny_config, toy_data_dir)
        with pytest.raises(ConfigurationError):
            trainer.search_top_k(model, dataset.vocab, [], tiny_config)


class TestRuns:
    def test_same_seed_same_metrics(self, tiny_config, toy_data_dir, tmp_path):
        config = tiny_config.replace(max_steps=3)
        trainer.run_training(config, toy_data_dir, tmp_path / "a")
        trainer.run_training(config, toy_data_dir, tmp_path / "b")
        first = (tmp_path / "a" / "metrics.csv").read_text()
        assert first == (tmp_path / "b" / "metrics.csv").read_text()
        assert first.splitlines()[0] == "step,gen_loss,disc_loss,lr,val_bleu2"
        assert len(first.splitlines()) == 4

    def test_resume_matches_uninterrupted_run(self, tiny_config, toy_data_dir, tmp_path):
        config = tiny_config.replace(max_steps=5, checkpoint_every=2)
        straight = trainer.run_training(config, toy_data_dir, tmp_path / "straight")

        trainer.run_training(config.replace(max_steps=2), toy_data_dir, tmp_path / "resumed")
        checkpoint = tmp_path / "resumed" / "checkpoints" / "step-000002"
        resumed = trainer.run_training(config, toy_data_dir, tmp_path / "resumed", resume=checkpoint)

        assert (tmp_path / "straight" / "metrics.csv").read_text() == (
            tmp_path / "resumed" / "metrics.csv"
        ).read_text()
        assert (straight.checkpoint / trainer.PARAMETERS_FILE).read_bytes() == (
            resumed.checkpoint / trainer.PARAMETERS_FILE
        ).read_bytes()
        assert resumed.state.step == 5

    def test_checkpoint_round_trip(self, tiny_config, toy_data_dir, tmp_path):
        model, dataset = _setup(tiny_config, toy_data_dir)
        state = trainer.RunState(seed=7, learning_rate=0.25, step=9, recent_losses=[1.5, 1.25])
        trainer.save_checkpoint(tmp_path / "ckpt", model, dataset.vocab, tiny_config, state)
        loaded = trainer.load_checkpoint(tmp_path / "ckpt")
        assert loaded.config == tiny_config
        assert loaded.vocab == dataset.vocab
        assert loaded.state.recent_losses == [1.5, 1.25]
        for name in model.parameters:
            assert_array_equal(loaded.model.parameters[name], model.parameters[name])

    def test_checkpoint_with_wrong_vocabulary(self, tiny_config, toy_data_dir, tmp_path):
        model, dataset = _setup(tiny_config, toy_data_dir)
        state = trainer.RunState(seed=7, learning_rate=0.5)
        path = trainer.save_checkpoint(tmp_path / "ckpt", model, dataset.vocab, tiny_config, state)
        with open(path / trainer.VOCAB_FILE, "a", encoding="utf-8") as handle:
            handle.write("extra\t1\n")
        with pytest.raises(CheckpointError):
            trainer.load_checkpoint(path)

    def test_non_finite_run_writes_diagnostics(self, tiny_config, toy_data_dir, tmp_path, monkeypatch):
        def explode(*args, **kwargs):
            raise NonFiniteLossError("boom", {"step": 0.0, "gen_loss": float("inf")})

        monkeypatch.setattr(trainer, "train_step", explode)
        with pytest.raises(NonFiniteLossError):
            trainer.run_training(tiny_config, toy_data_dir, tmp_path)
        assert (tmp_path / "diagnostics.json").is_file()


@pytest.mark.slow
def test_toy_corpus_smoke_run(toy_config_path, toy_data_dir, tmp_path):
    config = load_config(toy_config_path)
    result = trainer.run_training(config, toy_data_dir, tmp_path)
    assert result.state.step == 2000

    rows = result.rows
    rates = [float(row[3]) for row in rows]
    assert all(math.isfinite(float(row[1])) and math.isfinite(float(row[2])) for row in rows)
    assert all(later <= earlier for earlier, later in zip(rates, rates[1:]))

    checkpoint = trainer.load_checkpoint(result.checkpoint)
    examples = trainer.dataset_for(checkpoint.config, toy_data_dir, checkpoint.vocab).train
    assert trainer.training_nll(checkpoint.model, examples, config) < 0.2
    assert trainer.greedy_bleu(checkpoint.model, checkpoint.vocab, examples, config) > 0.9
    assert trainer.discriminator_margin(checkpoint.model, examples, config) > 0.2

    ablation = config.replace(disc_bootstrap=False)
    for step, batch in enumerate(_batches(ablation, trainer.dataset_for(ablation, toy_data_dir))):
        outcome = trainer.train_step(checkpoint.model, batch, ablation, 0.01, step)
        assert outcome.diagnostics["disc_samples"] == 3.0

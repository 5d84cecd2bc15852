"""Config format, pipeline stages, manifests, benchmark, ablation, CLI."""

import dataclasses
import io
import time
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import numpy as np
import pytest

from maskdiff.harness import (
    AblationReport,
    BenchError,
    ModelPolicy,
    RunConfig,
    SeedOutcome,
    action_accuracy,
    backend_report,
    behavior_classes,
    bench_spec,
    bench_template,
    divergence_probe,
    dump_config,
    episode_sequences,
    load_config,
    load_tokenizer,
    mode_config,
    parse_config,
    probe_examples,
    resolve_run_dir,
    run_benchmark,
    sha256_file,
    stage_eval,
    stage_gen_data,
    stage_train,
    stage_train_bpe,
    stage_train_codebook,
    tokenize_episode_frames,
    train_model,
)
from maskdiff.harness.ablation import run_ablation
from maskdiff.harness.cli import main
from maskdiff.image_codec import load_codebook
from maskdiff.kernels import available_backends
from maskdiff.model import Model
from maskdiff.sequence import parse
from maskdiff.toyworld import generate_dataset, load_episodes
from maskdiff.vocab import desk_layout

TINY = dict(
    data_episodes=30,
    data_seed=3,
    train_steps=6,
    batch_size=4,
    lr=1e-3,
    eval_episodes=2,
    eval_seed=5,
    sample_steps=4,
    codebook_iters=3,
    n_layers=1,
    d_model=32,
    n_heads=2,
    d_ff=64,
    max_len=192,
)


def tiny_cfg(**overrides) -> RunConfig:
    return RunConfig(**{**TINY, **overrides})


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """One fully-built tiny run directory shared by the read-only tests."""
    run = tmp_path_factory.mktemp("tiny_run")
    cfg = tiny_cfg()
    stage_gen_data(cfg, run)
    stage_train_codebook(cfg, run)
    stage_train_bpe(cfg, run)
    stage_train(cfg, run)
    return cfg, run


class TestConfig:
    def test_dump_parse_roundtrip(self):
        cfg = tiny_cfg(mode="vanilla", lr=3e-4, cfg_weight=2.5, lr_decay=False)
        assert parse_config(dump_config(cfg)) == cfg

    def test_comments_blanks_and_spacing_tolerated(self):
        cfg = parse_config(
            "# a comment\n\n  run.seed=9   # trailing"
            "\ntrain.lr = 0.002\ntrain.lr_decay = false\n"
        )
        assert cfg.seed == 9 and cfg.lr == 0.002 and cfg.lr_decay is False

    def test_bad_lines_rejected(self):
        with pytest.raises(ValueError, match="unknown key"):
            parse_config("run.bogus = 1")
        with pytest.raises(ValueError, match="duplicate"):
            parse_config("run.seed = 1\nrun.seed = 2")
        with pytest.raises(ValueError, match="expected an integer"):
            parse_config("run.seed = soon")
        with pytest.raises(ValueError, match="true or false"):
            parse_config("train.lr_decay = yes")
        with pytest.raises(ValueError, match="key = value"):
            parse_config("just some words")

    def test_incompatible_flags_rejected(self):
        # caching is defined relative to the blockwise mask
        with pytest.raises(ValueError):
            tiny_cfg(attention="full", cache="prefix+response")
        with pytest.raises(ValueError, match="mode"):
            tiny_cfg(mode="fancy")
        with pytest.raises(ValueError, match="task"):
            tiny_cfg(eval_task="both")

    def test_referenced_files_must_exist(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text("files.dataset = missing.bin\n")
        with pytest.raises(FileNotFoundError, match="missing.bin"):
            load_config(cfg_path)
        (tmp_path / "real.bin").write_bytes(b"x")
        cfg_path.write_text("files.dataset = real.bin\n")
        cfg = load_config(cfg_path)
        assert Path(cfg.dataset_path).is_absolute()
        assert Path(cfg.dataset_path).name == "real.bin"

    def test_missing_config_file_names_the_path(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.cfg"):
            load_config(tmp_path / "nope.cfg")

    def test_sequence_spec_geometry(self):
        cot = RunConfig().sequence_spec()
        assert (cot.length, cot.boundary) == (170, 78)
        plain = RunConfig(mode="vanilla").sequence_spec()
        assert (plain.length, plain.boundary) == (96, 78)
        assert plain.subgoal_tokens == 0 and plain.reasoning_len == 0
        assert cot.length <= RunConfig().max_len


class TestPipelineStages:
    def test_dataset_generation_is_byte_deterministic(self, tmp_path):
        cfg = tiny_cfg(data_episodes=6)
        a = stage_gen_data(cfg, tmp_path / "a")
        b = stage_gen_data(cfg, tmp_path / "b")
        assert a.read_bytes() == b.read_bytes()

    def test_manifest_records_config_and_output_hashes(self, tmp_path):
        cfg = tiny_cfg(data_episodes=6)
        dataset = stage_gen_data(cfg, tmp_path)
        manifest = (tmp_path / "manifest-gen-data.txt").read_text()
        assert "command = gen-data" in manifest
        assert f"output.dataset = {sha256_file(dataset)}" in manifest
        assert "config.data.episodes = 6" in manifest
        assert "seed.data = 3" in manifest
        assert "version.numpy" in manifest

    def test_missing_inputs_name_the_path(self, tmp_path):
        cfg = tiny_cfg()
        with pytest.raises(FileNotFoundError, match="dataset.bin"):
            stage_train_codebook(cfg, tmp_path)
        with pytest.raises(FileNotFoundError, match="model.ckpt"):
            stage_eval(cfg, tmp_path)

    def test_run_dir_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MASKDIFF_RUN_DIR", str(tmp_path / "env_root"))
        run = resolve_run_dir(str(tmp_path / "flag_root"), "r1")
        assert run == tmp_path / "env_root" / "r1" and run.is_dir()
        monkeypatch.delenv("MASKDIFF_RUN_DIR")
        run = resolve_run_dir(str(tmp_path / "flag_root"), "r1")
        assert run == tmp_path / "flag_root" / "r1"

    def test_full_chain_trains_and_evaluates(self, tiny_run):
        cfg, run = tiny_run
        for name in ("dataset.bin", "codebook.bin", "norm.txt", "bpe.txt",
                     "model.ckpt", "loss_curve.csv"):
            assert (run / name).exists(), name
        curve = (run / "loss_curve.csv").read_text().splitlines()
        assert curve[0] == "step,loss,grad_norm"
        assert len(curve) == cfg.train_steps + 1
        result = stage_eval(cfg, run)
        assert result.n_episodes == cfg.eval_episodes
        eval_rows = (run / "eval.csv").read_text().splitlines()
        assert eval_rows[0].startswith("episodes,successes,success_rate")
        assert len(eval_rows) == 2

    def test_training_is_deterministic(self, tiny_run, tmp_path):
        cfg, run = tiny_run
        episodes = load_episodes(run / "dataset.bin")[:8]
        codebook = load_codebook(run / "codebook.bin")
        tokenizer = load_tokenizer(cfg, run)
        layout = desk_layout()
        spec = cfg.sequence_spec()
        tokens = tokenize_episode_frames(episodes, codebook)
        seqs = episode_sequences(
            episodes, tokens, cfg, tokenizer, layout, spec, np.random.default_rng(0)
        )
        r1 = train_model(cfg, seqs, layout, spec, seed=11)
        r2 = train_model(cfg, seqs, layout, spec, seed=11)
        r1.model.save(tmp_path / "m1.ckpt")
        r2.model.save(tmp_path / "m2.ckpt")
        assert (tmp_path / "m1.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
        assert r1.losses == r2.losses
        assert not r1.diverged and r1.steps_run == cfg.train_steps

    def test_sequences_parse_back_and_actions_roundtrip(self, tiny_run):
        cfg, run = tiny_run
        episodes = load_episodes(run / "dataset.bin")[:3]
        codebook = load_codebook(run / "codebook.bin")
        tokenizer = load_tokenizer(cfg, run)
        layout = desk_layout()
        spec = cfg.sequence_spec()
        tokens = tokenize_episode_frames(episodes, codebook)
        seqs = episode_sequences(episodes, tokens, cfg, tokenizer, layout, spec, None)
        assert len(seqs) == sum(ep.n_steps - cfg.chunk + 1 for ep in episodes)
        parts = parse(seqs[0], layout, spec)
        assert parts.subgoal is not None and parts.reasoning is not None
        decoded = tokenizer.decode(list(parts.action), cfg.chunk)
        expert = np.asarray(episodes[0].actions[: cfg.chunk], dtype=np.float64)
        assert np.max(np.abs(decoded.values - expert)) < 0.25  # quantization only
        # vanilla templates drop the intermediate segments entirely
        van = dataclasses.replace(cfg, mode="vanilla")
        vspec = van.sequence_spec()
        vseqs = episode_sequences(episodes, tokens, van, tokenizer, layout, vspec, None)
        vparts = parse(vseqs[0], layout, vspec)
        assert vparts.subgoal is None and vparts.reasoning is None
        assert vparts.action == parts.action

    def test_policy_falls_back_to_zero_chunk_on_decode_garbage(self, tiny_run):
        cfg, run = tiny_run
        episodes = load_episodes(run / "dataset.bin")
        codebook = load_codebook(run / "codebook.bin")
        layout = desk_layout()
        # an untrained model emits arbitrary action codes; most fail to decode
        policy = ModelPolicy(
            model=Model(cfg.model_config(vocab_size=layout.total_size, seed=99)),
            codebook=codebook,
            tokenizer=load_tokenizer(cfg, run),
            layout=layout,
            spec=cfg.sequence_spec(),
            schedule=cfg.schedule(seed=0),
            inference=cfg.inference(),
            chunk_len=cfg.chunk,
        )
        ep = episodes[0]
        chunks = policy([(ep.frames[0], ep.instruction, ep.states[0])] * 3)
        assert len(chunks) == 3
        for chunk in chunks:
            assert chunk.shape == (cfg.chunk, 3)
            assert np.all(np.isfinite(chunk))
        assert policy.forward_calls > 0


@pytest.fixture(scope="module")
def tiny_bench():
    cfg = tiny_cfg()
    layout = desk_layout()
    spec = cfg.sequence_spec()
    model = Model(cfg.model_config(vocab_size=layout.total_size, seed=4))
    return cfg, layout, spec, model


class TestBench:
    def test_bench_spec_geometry(self):
        spec = bench_spec()
        assert spec.length == 256
        assert spec.boundary == 144
        assert spec.boundary / spec.length >= 0.5

    def test_mode_configs(self):
        assert mode_config("full").attention == "full"
        assert mode_config("prefix").cache == "prefix"
        assert mode_config("prefix_kv", refresh=7).refresh_interval == 7
        with pytest.raises(ValueError, match="unknown bench mode"):
            mode_config("warp")

    def test_report_rows_fairness_and_exactness(self, tiny_bench):
        cfg, layout, spec, model = tiny_bench
        schedule = cfg.schedule(seed=2)
        report = run_benchmark(
            model, layout, spec, schedule,
            ("full", "block", "prefix", "prefix_kv"),
            chunk_len=cfg.chunk, trials=2, warmup=1,
        )
        assert [r.label for r in report.rows] == ["full", "block", "prefix", "prefix_kv"]
        assert len({r.input_hash for r in report.rows}) == 1
        for row in report.rows:
            assert row.decode_steps == schedule.steps
            assert row.seq_len == spec.length
            assert row.chunk_seconds > 0
            assert row.action_hz == pytest.approx(cfg.chunk * row.chunks_per_sec)
        assert report.row("prefix").max_logit_divergence <= 1e-5
        assert report.row("block").max_logit_divergence == 0.0
        assert report.speedup("full", "prefix") == pytest.approx(
            report.row("full").chunk_seconds / report.row("prefix").chunk_seconds
        )
        csv = report.to_csv().splitlines()
        assert csv[0] == (
            "label,decode_steps,seq_len,chunk_seconds,chunks_per_sec,"
            "action_hz,max_logit_divergence,forward_calls,input_hash"
        )
        assert len(csv) == 5
        with pytest.raises(KeyError):
            report.row("missing")

    def test_refresh_one_is_exact(self, tiny_bench):
        cfg, layout, spec, model = tiny_bench
        schedule = cfg.schedule(seed=3)
        template = bench_template(layout, spec, seed=3)
        div = divergence_probe(
            model, template, layout, spec, schedule,
            mode_config("prefix_kv", refresh=1), seed=3,
        )
        assert div <= 1e-5
        assert divergence_probe(
            model, template, layout, spec, schedule, mode_config("block"), seed=3
        ) == 0.0

    def test_insufficient_timer_resolution_is_an_error(self, tiny_bench, monkeypatch):
        cfg, layout, spec, model = tiny_bench

        class FakeInfo:
            resolution = 1e9

        monkeypatch.setattr(time, "get_clock_info", lambda name: FakeInfo)
        with pytest.raises(BenchError, match="enlarge the workload"):
            run_benchmark(
                model, layout, spec, cfg.schedule(), ("block",),
                trials=1, warmup=0,
            )

    def test_behavior_classes(self):
        chunk = np.array(
            [
                [0.6, -0.6, 0.0],
                [0.4, -0.4, 0.7],
                [1.9, -2.5, -0.7],
                [0.0, 1.0, 0.3],
                [-1.0, 0.49, -0.51],
            ]
        )
        expected = np.array(
            [
                [1, -1, 0],
                [0, 0, 1],
                [1, -1, -1],
                [0, 1, 0],
                [-1, 0, -1],
            ]
        )
        assert np.array_equal(behavior_classes(chunk), expected)

    def test_probe_examples_cover_every_window(self):
        examples = probe_examples(4, seed=9, chunk=5)
        expected = sum(ep.n_steps - 5 + 1 for ep in generate_dataset(4, seed=9))
        assert len(examples) == expected
        again = probe_examples(4, seed=9, chunk=5)
        assert all(
            np.array_equal(a.action_chunk, b.action_chunk)
            for a, b in zip(examples, again)
        )

    def test_action_accuracy_oracle_policies(self):
        examples = probe_examples(4, seed=9, chunk=5)
        cursor = {"i": 0}

        def replay_expert(observations):
            start = cursor["i"]
            cursor["i"] += len(observations)
            return [ex.action_chunk for ex in examples[start : start + len(observations)]]

        assert action_accuracy(replay_expert, examples) == 1.0

        def zeros(observations):
            return [np.zeros((5, 3)) for _ in observations]

        zero_score = action_accuracy(zeros, examples)
        assert 0.0 <= zero_score < 1.0
        with pytest.raises(ValueError, match="empty probe"):
            action_accuracy(zeros, [])

    def test_backend_report_covers_available_backends(self):
        rows = backend_report(heads=2, length=32, trials=2)
        names = {row.backend for row in rows}
        assert names == set(available_backends())
        assert "reference" in names
        for row in rows:
            assert row.seconds >= 0 and row.op in ("masked_softmax", "softmax_backward")


class TestAblationReport:
    def _report(self):
        def outcome(variant, seed, rate):
            return SeedOutcome(
                variant=variant, seed=seed, success_rate=rate, mean_steps=10.0,
                flagged=0, decode_failures=0, diverged=False, train_seconds=1.0,
            )

        return AblationReport(
            outcomes=(
                outcome("vanilla", 0, 0.5),
                outcome("vanilla", 1, 0.7),
                outcome("vanilla", 2, 0.6),
                outcome("mm_cot", 0, 0.8),
                outcome("mm_cot", 1, 0.9),
                outcome("mm_cot", 2, 1.0),
            )
        )

    def test_statistics_match_hand_computation(self):
        report = self._report()
        assert report.mean("vanilla") == pytest.approx(0.6)
        assert report.mean("mm_cot") == pytest.approx(0.9)
        assert report.stderr("vanilla") == pytest.approx(0.1 / np.sqrt(3))
        gap, err = report.gap()
        assert gap == pytest.approx(0.3)
        assert err == pytest.approx(np.hypot(0.1 / np.sqrt(3), 0.1 / np.sqrt(3)))

    def test_csv_schema(self):
        lines = self._report().to_csv().splitlines()
        assert lines[0] == "variant,success_mean,success_stderr,mean_steps,seeds,n_diverged"
        assert lines[1].startswith("vanilla,") and lines[2].startswith("mm_cot,")
        assert "0;1;2" in lines[1]

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="variant"):
            self._report().of("hybrid")

    def test_seed_validation(self, tmp_path):
        cfg = tiny_cfg()
        with pytest.raises(ValueError, match="at least 3 seeds"):
            run_ablation(cfg, tmp_path, seeds=(0, 1))
        with pytest.raises(ValueError, match="distinct"):
            run_ablation(cfg, tmp_path, seeds=(0, 1, 1))

    def test_tiny_ablation_end_to_end(self, tmp_path):
        cfg = tiny_cfg(
            data_episodes=20, data_seed=2, train_steps=3, batch_size=3,
            eval_episodes=2, sample_steps=2, eval_horizon=10,
        )
        report = run_ablation(cfg, tmp_path, seeds=(0, 1, 2))
        assert len(report.outcomes) == 6
        assert len(report.of("vanilla")) == 3 and len(report.of("mm_cot")) == 3
        assert (tmp_path / "ablation.csv").exists()
        assert (tmp_path / "manifest-ablation.txt").exists()
        gap, err = report.gap()
        assert np.isfinite(gap) and np.isfinite(err)


def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        try:
            code = main(list(argv))
        except SystemExit as exc:  # argparse usage failures
            code = exc.code
    return code, out.getvalue(), err.getvalue()


class TestCli:
    def test_unknown_command_prints_usage_and_fails(self):
        code, _out, err = run_cli("transmogrify")
        assert code == 2
        assert "usage" in err or "invalid choice" in err

    def test_gen_data_twice_is_byte_identical(self, tmp_path):
        args = ("gen-data", "--episodes", "5", "--seed", "1")
        code_a, out_a, _ = run_cli(*args, "--out", str(tmp_path), "--name", "a")
        code_b, _, _ = run_cli(*args, "--out", str(tmp_path), "--name", "b")
        assert code_a == 0 and code_b == 0
        assert "wrote 5 episodes" in out_a
        bytes_a = (tmp_path / "a" / "dataset.bin").read_bytes()
        assert bytes_a == (tmp_path / "b" / "dataset.bin").read_bytes()
        code_c, _, _ = run_cli(*args[:-1], "2", "--out", str(tmp_path), "--name", "c")
        assert code_c == 0
        assert bytes_a != (tmp_path / "c" / "dataset.bin").read_bytes()

    def test_missing_files_fail_with_the_path(self, tmp_path):
        code, _out, err = run_cli("train", "--config", str(tmp_path / "ghost.cfg"))
        assert code == 1 and "ghost.cfg" in err
        code, _out, err = run_cli(
            "train", "--out", str(tmp_path), "--name", "empty"
        )
        assert code == 1 and "dataset.bin" in err

    def test_full_cli_chain_with_config_file(self, tmp_path):
        cfg_path = tmp_path / "tiny.cfg"
        cfg_path.write_text(dump_config(tiny_cfg()))
        base = ("--config", str(cfg_path), "--out", str(tmp_path), "--name", "run")
        for command in ("gen-data", "train-codebook", "train-bpe", "train", "eval"):
            code, out, err = run_cli(command, *base)
            assert code == 0, f"{command}: {err or out}"
        run = tmp_path / "run"
        assert (run / "model.ckpt").exists()
        assert (run / "eval.csv").exists()
        assert (run / "manifest-eval.txt").exists()
        code, out, _ = run_cli("bench", *base, "--modes", "block,prefix", "--trials", "1")
        assert code == 0
        assert (run / "bench.csv").read_text().splitlines()[0].startswith("label,")
        assert len((run / "bench.csv").read_text().splitlines()) == 3
        assert "speedup" not in out  # no 'full' baseline requested
        code, out, _ = run_cli("inspect", str(run / "dataset.bin"))
        assert code == 0 and "episodes" in out
        code, out, _ = run_cli("inspect", str(run / "model.ckpt"))
        assert code == 0 and "parameters" in out
        code, out, _ = run_cli("inspect", str(run / "codebook.bin"))
        assert code == 0 and "codebook" in out
        code, out, _ = run_cli("inspect", str(run / "manifest-train.txt"))
        assert code == 0 and "text artifact" in out
        code, _out, err = run_cli("inspect", str(run / "nothing.bin"))
        assert code == 1 and "nothing.bin" in err

"""Run configuration, experiment orchestration, benchmark, and CLI."""

from .ablation import AblationReport, SeedOutcome, run_ablation
from .bench import (
    BenchError,
    BenchReport,
    BenchRow,
    action_accuracy,
    backend_report,
    behavior_classes,
    bench_spec,
    bench_template,
    divergence_probe,
    mode_config,
    probe_examples,
    run_benchmark,
)
from .config import RunConfig, dump_config, load_config, parse_config, save_config
from .pipeline import (
    ModelPolicy,
    TrainResult,
    artifact_paths,
    episode_sequences,
    load_policy,
    load_tokenizer,
    resolve_run_dir,
    sha256_file,
    stage_eval,
    stage_gen_data,
    stage_train,
    stage_train_bpe,
    stage_train_codebook,
    tokenize_episode_frames,
    train_model,
    write_manifest,
)

__all__ = [
    "AblationReport",
    "BenchError",
    "BenchReport",
    "BenchRow",
    "ModelPolicy",
    "RunConfig",
    "SeedOutcome",
    "TrainResult",
    "action_accuracy",
    "artifact_paths",
    "backend_report",
    "behavior_classes",
    "bench_spec",
    "bench_template",
    "divergence_probe",
    "dump_config",
    "episode_sequences",
    "load_config",
    "load_policy",
    "load_tokenizer",
    "mode_config",
    "parse_config",
    "probe_examples",
    "resolve_run_dir",
    "run_ablation",
    "run_benchmark",
    "save_config",
    "sha256_file",
    "stage_eval",
    "stage_gen_data",
    "stage_train",
    "stage_train_bpe",
    "stage_train_codebook",
    "tokenize_episode_frames",
    "train_model",
    "write_manifest",
]

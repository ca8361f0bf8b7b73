"""
codecedit command line: corpus generation, the three training stages, editing,
zero-shot TTS, watermark detection and evaluation.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

import json
import sys
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import click
import numpy as np

from codecedit.ar_trainer import save_ar, tokenize_corpus, train_ar
from codecedit.audio import peak_normalize, read_wav, write_wav
from codecedit.codec_trainer import load_codec, reconstruction_error, save_codec, train_codec
from codecedit.config import RunConfig, load_config, validate_config
from codecedit.corpus import (filter_by_duration, load_alignment, load_lexicon, load_manifest,
                              load_watermark_bits, save_watermark_bits)
from codecedit.errors import ConfigError
from codecedit.evaluation import render_table, run_evaluation, wm_frame_accuracy
from codecedit.inference import AR_DIR, CODEC_DIR, WM_DIR, EditResult, InferenceEngine
from codecedit.logger import get_logger, set_level
from codecedit.phonemes import PhonemeVocab
from codecedit.synthetic import LEXICON_FILE, make_synthetic_corpus
from codecedit.training import load_training_audio
from codecedit.watermark import load_wm_codec, predict_watermark, save_wm_codec
from codecedit.watermark_trainer import train_wm_codec

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

EFFECTIVE_CONFIG_FILE = "effective_config.json"
METRICS_FILE = "metrics.jsonl"
DETECT_THRESHOLD = 0.5


class RunState:
    """Per-invocation state shared between the group and its subcommands."""

    def __init__(self):
        self.config: Optional[RunConfig] = None
        self.command = "codecedit"
        self.current_step = "initialization"

    def step(self, name: str) -> None:
        self.current_step = name
        logger.info("[%s] %s", self.command, name)


def _write_json(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_effective_config(out_dir: Path, state: RunState) -> Path:
    return _write_json(out_dir / EFFECTIVE_CONFIG_FILE, {
        "command": state.command,
        "seed": state.config.seed,
        "config": state.config.snapshot(),
    })


def _write_metrics(path: Path, records: Iterable[Dict[str, Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def _training_entries(manifest: str):
    entries = filter_by_duration(load_manifest(manifest))
    if not entries:
        raise ConfigError(f"No usable utterances in {manifest}")
    return entries


def _start(ctx: click.Context, command: str) -> Tuple[RunState, RunConfig]:
    state: RunState = ctx.obj
    state.command = command
    return state, state.config


def _frame_runs(flags: np.ndarray) -> List[Tuple[int, int]]:
    """Inclusive (start, end) runs of True frames."""
    runs = []
    start = None
    for t, flag in enumerate(flags):
        if flag and start is None:
            start = t
        elif not flag and start is not None:
            runs.append((start, t - 1))
            start = None
    if start is not None:
        runs.append((start, len(flags) - 1))
    return runs


def _write_edit_outputs(out_dir: Path, result: EditResult, state: RunState, frame_rate: int) -> None:
    state.step("writing outputs")
    write_wav(out_dir / "out.wav", result.waveform)
    save_watermark_bits(out_dir / "out.wm.bin", result.watermark.bits)
    generation = result.generation
    _write_json(out_dir / "out.json", {
        "seed": state.config.sampler.seed,
        "frame_rate": frame_rate,
        "num_frames": len(result.watermark),
        "source_spans": [list(s) for s in result.source_spans],
        "spans": [list(s) for s in generation.spans] if generation else [],
        "span_lengths": list(generation.span_lengths) if generation else [],
        "stop_reasons": list(generation.stop_reasons) if generation else [],
        "watermark": [int(b) for b in result.watermark.bits],
        "watermarked_frames": result.watermark.ones,
    })
    click.echo(f"Wrote {out_dir / 'out.wav'} ({result.waveform.duration:.2f}s, "
               f"{result.watermark.ones} watermarked frames)")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON config file layered over the defaults.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Dotted config override, e.g. --set sampler.top_p=0.9 (repeatable).")
@click.option("--seed", type=int, default=None, help="Seed for training, sampling and corpus generation.")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default: $LOG_LEVEL or INFO).")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], overrides: Sequence[str], seed: Optional[int],
        log_level: Optional[str]) -> None:
    """Codec-LM speech editing with context-aware watermarked decoding."""
    state = ctx.ensure_object(RunState)
    if log_level:
        try:
            set_level(log_level)
        except ValueError as e:
            raise click.BadParameter(str(e), param_hint="--log-level") from e
    state.current_step = "loading configuration"
    overrides = list(overrides)
    if seed is not None:
        overrides += [f"seed={seed}", f"sampler.seed={seed}", f"synth.seed={seed}"]
    state.config = load_config(config_path, overrides)
    validate_config(state.config)


@cli.command("make-synthetic")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Corpus directory.")
@click.pass_context
def make_synthetic(ctx: click.Context, out_dir: str) -> None:
    """Render the procedural toy corpus (WAVs, alignments, lexicon, manifest)."""
    state, config = _start(ctx, "make-synthetic")
    out = Path(out_dir)
    _write_effective_config(out, state)
    state.step("rendering corpus")
    entries = make_synthetic_corpus(config.synth, out)
    click.echo(f"Wrote {len(entries)} utterances to {out}")


@cli.command("train-codec")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ckpt", required=True, type=click.Path(file_okay=False), help="Checkpoint root.")
@click.pass_context
def train_codec_cmd(ctx: click.Context, manifest: str, ckpt: str) -> None:
    """Train the residual-VQ codec; writes <ckpt>/codec."""
    state, config = _start(ctx, "train-codec")
    out = Path(ckpt) / CODEC_DIR
    _write_effective_config(out, state)
    state.step("loading audio")
    audio = load_training_audio(_training_entries(manifest), config.codec.sample_rate)
    state.step("training codec")
    codec, metrics = train_codec(audio, config.codec, config.codec_train, config.seed)
    state.step("saving checkpoint")
    error = reconstruction_error(codec, audio)
    save_codec(out, codec, {"reconstruction_error": error, "seed": config.seed})
    _write_metrics(out / METRICS_FILE, metrics)
    click.echo(f"Codec saved to {out} (reconstruction loss {error:.4f})")


@cli.command("train-wm")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ckpt", required=True, type=click.Path(exists=True, file_okay=False),
              help="Checkpoint root holding codec/.")
@click.pass_context
def train_wm_cmd(ctx: click.Context, manifest: str, ckpt: str) -> None:
    """Train the watermark codec on top of the frozen codec; writes <ckpt>/wm."""
    state, config = _start(ctx, "train-wm")
    out = Path(ckpt) / WM_DIR
    _write_effective_config(out, state)
    state.step("loading codec")
    base = load_codec(Path(ckpt) / CODEC_DIR)
    state.step("loading audio")
    audio = load_training_audio(_training_entries(manifest), base.config.sample_rate)
    state.step("training watermark codec")
    model, metrics = train_wm_codec(audio, base, base.config, config.wm_train, config.seed)
    state.step("saving checkpoint")
    save_wm_codec(out, model, {"seed": config.seed, "final_accuracy": metrics[-1]["accuracy"] if metrics else None})
    _write_metrics(out / METRICS_FILE, metrics)
    click.echo(f"Watermark codec saved to {out}")


@cli.command("train-ar")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ckpt", required=True, type=click.Path(exists=True, file_okay=False),
              help="Checkpoint root holding codec/.")
@click.option("--lexicon", "lexicon_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Lexicon TSV (default: lexicon.tsv next to the manifest).")
@click.pass_context
def train_ar_cmd(ctx: click.Context, manifest: str, ckpt: str, lexicon_path: Optional[str]) -> None:
    """Train the autoregressive token model; writes <ckpt>/ar."""
    state, config = _start(ctx, "train-ar")
    out = Path(ckpt) / AR_DIR
    _write_effective_config(out, state)
    state.step("loading codec")
    codec = load_codec(Path(ckpt) / CODEC_DIR)
    if (codec.config.num_codebooks, codec.config.codebook_size) != (config.ar.num_codebooks,
                                                                   config.ar.codebook_size):
        raise ConfigError("AR codebook settings do not match the trained codec")
    state.step("loading lexicon")
    lexicon = load_lexicon(lexicon_path or Path(manifest).parent / LEXICON_FILE)
    vocab = PhonemeVocab.build(lexicon.symbols())
    ar_config = config.ar
    if ar_config.phoneme_vocab_size < len(vocab):
        logger.info("Growing phoneme_vocab_size from %s to %s", ar_config.phoneme_vocab_size, len(vocab))
        ar_config = ar_config.model_copy(update={"phoneme_vocab_size": len(vocab)})
    state.step("tokenizing corpus")
    corpus = tokenize_corpus(_training_entries(manifest), codec, lexicon, vocab)
    state.step("training AR model")
    model, metrics = train_ar(corpus, ar_config, config.ar_train, config.seed, phoneme_pad=vocab.pad_id)
    state.step("saving checkpoint")
    save_ar(out, model, vocab, lexicon, {"seed": config.seed})
    _write_metrics(out / METRICS_FILE, metrics)
    click.echo(f"AR model saved to {out} (final loss {metrics[-1]['loss']:.4f})" if metrics
               else f"AR model saved to {out}")


@cli.command("edit")
@click.option("--audio", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--orig", required=True, help="Transcript of the input audio.")
@click.option("--target", required=True, help="Desired transcript.")
@click.option("--align", "align_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Word alignment (JSON or CSV) of the original transcript.")
@click.option("--ckpt", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--no-context", is_flag=True, help="Decode without the unedited audio as context.")
@click.option("--no-watermark", is_flag=True, help="Decode without embedding the watermark.")
@click.pass_context
def edit_cmd(ctx: click.Context, audio: str, orig: str, target: str, align_path: str, ckpt: str, out_dir: str,
             no_context: bool, no_watermark: bool) -> None:
    """Edit speech to match the target transcript; writes out.wav, out.json and out.wm.bin."""
    state, config = _start(ctx, "edit")
    out = Path(out_dir)
    _write_effective_config(out, state)
    state.step("loading models")
    engine = InferenceEngine.from_checkpoints(ckpt, config)
    cfg = engine.models.codec.config
    state.step("reading inputs")
    w = peak_normalize(read_wav(audio, cfg.sample_rate))
    alignment = load_alignment(align_path)
    state.step("editing")
    result = engine.edit(w, orig, target, alignment, use_context=not no_context,
                         use_watermark=not no_watermark)
    _write_edit_outputs(out, result, state, cfg.frame_rate)


@cli.command("tts")
@click.option("--prompt", "prompt_audio", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Prompt audio (1-8 s).")
@click.option("--prompt-text", required=True, help="Transcript of the prompt.")
@click.option("--target", required=True, help="Text to speak after the prompt.")
@click.option("--ckpt", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_context
def tts_cmd(ctx: click.Context, prompt_audio: str, prompt_text: str, target: str, ckpt: str,
            out_dir: str) -> None:
    """Continue a prompt in its voice; writes out.wav, out.json and out.wm.bin."""
    state, config = _start(ctx, "tts")
    out = Path(out_dir)
    _write_effective_config(out, state)
    state.step("loading models")
    engine = InferenceEngine.from_checkpoints(ckpt, config)
    cfg = engine.models.codec.config
    state.step("reading prompt")
    w = peak_normalize(read_wav(prompt_audio, cfg.sample_rate))
    state.step("synthesizing")
    result = engine.tts(w, prompt_text, target)
    _write_edit_outputs(out, result, state, cfg.frame_rate)


@cli.command("detect-wm")
@click.option("--audio", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ckpt", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--bits", "bits_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Watermark sidecar to score the detection against.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Report directory (default: <audio dir>/detect).")
@click.pass_context
def detect_wm_cmd(ctx: click.Context, audio: str, ckpt: str, bits_path: Optional[str],
                  out_dir: Optional[str]) -> None:
    """Locate generated frames from the watermark alone."""
    state, config = _start(ctx, "detect-wm")
    out = Path(out_dir) if out_dir else Path(audio).parent / "detect"
    _write_effective_config(out, state)
    state.step("loading watermark codec")
    model = load_wm_codec(Path(ckpt) / WM_DIR)
    cfg = model.config
    state.step("detecting")
    probs = predict_watermark(read_wav(audio, cfg.sample_rate), cfg, model)
    flags = probs > DETECT_THRESHOLD
    runs = _frame_runs(flags)
    report: Dict[str, Any] = {
        "num_frames": int(probs.size),
        "watermarked_frames": int(flags.sum()),
        "spans": [{"start": s, "end": e, "start_s": s / cfg.frame_rate, "end_s": (e + 1) / cfg.frame_rate,
                   "mean_prob": float(probs[s:e + 1].mean())} for s, e in runs],
    }
    click.echo(f"{report['watermarked_frames']} of {report['num_frames']} frames watermarked")
    for i, span in enumerate(report["spans"]):
        click.echo(f"  span {i}: frames {span['start']}-{span['end']} "
                   f"({span['start_s']:.2f}-{span['end_s']:.2f}s) mean p={span['mean_prob']:.3f}")
    if not runs:
        click.echo("  no generated frames detected")
    if bits_path:
        truth = load_watermark_bits(bits_path)
        report["accuracy"] = wm_frame_accuracy(truth, probs, DETECT_THRESHOLD)
        click.echo(f"Frame accuracy against {bits_path}: {report['accuracy']:.4f}")
    _write_json(out / "detect.json", report)


@cli.command("eval")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Held-out utterances.")
@click.option("--ckpt", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--n-seeds", default=5, show_default=True, type=click.IntRange(min=1),
              help="Generations per utterance for the runaway rate.")
@click.pass_context
def eval_cmd(ctx: click.Context, manifest: str, ckpt: str, out_dir: str, n_seeds: int) -> None:
    """Compute the evaluation metrics; writes report.json and prints a table."""
    state, config = _start(ctx, "eval")
    out = Path(out_dir)
    _write_effective_config(out, state)
    state.step("loading models")
    engine = InferenceEngine.from_checkpoints(ckpt, config)
    models = engine.models
    state.step("loading corpus")
    entries = _training_entries(manifest)
    waveforms = load_training_audio(entries, models.codec.config.sample_rate)
    corpus = tokenize_corpus(entries, models.codec, models.lexicon, models.vocab)
    state.step("evaluating")
    report = run_evaluation(engine, entries, waveforms, corpus, seed=config.seed, n_seeds=n_seeds)
    report.write(out / "report.json")
    click.echo(render_table(report))


def main(argv: Optional[Sequence[str]] = None) -> int:
    state = RunState()
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name="codecedit",
                          standalone_mode=False, obj=state)
        return result if isinstance(result, int) else EXIT_OK
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_USAGE
    except ConfigError as e:
        logger.error("Configuration error in '%s' at step '%s': %s", state.command, state.current_step, e)
        click.echo(f"Error: {e}", err=True)
        return EXIT_USAGE
    except Exception as e:
        logger.exception("Error running '%s' at step '%s': %s", state.command, state.current_step, str(e))
        click.echo(f"Error: failed at step '{state.current_step}': {e}", err=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

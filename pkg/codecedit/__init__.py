from .config import RunConfig, load_config, validate_config
from .audio import Waveform, read_wav, write_wav, peak_normalize
from .codec import NeuralCodec, CodeGrid, encode, quantize_rvq, dequantize_rvq, decode, codec_reconstruct
from .codec_trainer import train_codec, save_codec, load_codec
from .watermark import WatermarkCodec, WatermarkSeq, wm_decode, predict_watermark, splice_and_mark
from .watermark_trainer import train_wm_codec
from .seq_layout import SpanSet, SpecialVocab, rearrange, invert_rearrange, delay_stack, delay_unstack
from .ar_model import ARModel, weighted_nll_loss
from .ar_trainer import train_ar, save_ar, load_ar, tokenize_corpus
from .edit_planner import WordAlignment, diff_transcripts, plan_spans
from .sampling import cfg_mix, nucleus_filter
from .inference import InferenceEngine, EditModels, edit_speech, synthesize_tts, generate_spans
from .synthetic import make_synthetic_corpus
from .evaluation import EvalReport, run_evaluation

__version__ = '0.1.0'

__all__ = [
    'RunConfig',
    'load_config',
    'validate_config',
    'Waveform',
    'read_wav',
    'write_wav',
    'peak_normalize',
    'NeuralCodec',
    'CodeGrid',
    'encode',
    'quantize_rvq',
    'dequantize_rvq',
    'decode',
    'codec_reconstruct',
    'train_codec',
    'save_codec',
    'load_codec',
    'WatermarkCodec',
    'WatermarkSeq',
    'wm_decode',
    'predict_watermark',
    'splice_and_mark',
    'train_wm_codec',
    'SpanSet',
    'SpecialVocab',
    'rearrange',
    'invert_rearrange',
    'delay_stack',
    'delay_unstack',
    'ARModel',
    'weighted_nll_loss',
    'train_ar',
    'save_ar',
    'load_ar',
    'tokenize_corpus',
    'WordAlignment',
    'diff_transcripts',
    'plan_spans',
    'cfg_mix',
    'nucleus_filter',
    'InferenceEngine',
    'EditModels',
    'edit_speech',
    'synthesize_tts',
    'generate_spans',
    'make_synthetic_corpus',
    'EvalReport',
    'run_evaluation',
]

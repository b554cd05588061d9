"""Decode a manifest with a trained model and score it per task:
ASR -> WER, summarization -> ROUGE-1/2/L, concepts -> micro P/R/F1."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .data import Vocabulary, read_features, read_manifest, resolve_features
from .metrics import (
    MetricReport,
    corpus_concept_prf,
    corpus_rouge,
    corpus_wer,
    tokenize,
)
from .model import ModelConfig, ModelParams, beam_search, encode
from .tensor import Tensor


def default_max_len(ref_token_counts: list[int]) -> int:
    return max(8, int(1.5 * max(ref_token_counts)) + 2)


def decode_records(
    config: ModelConfig,
    params: ModelParams,
    vocab: Vocabulary,
    manifest_path,
    records,
    beam: int,
    max_len: int,
    max_input_frames: int = 10000,
) -> list[list[str]]:
    hyps = []
    for rec in records:
        feats = read_features(resolve_features(manifest_path, rec))[:max_input_frames]
        enc = encode(config, params, Tensor(feats))
        result = beam_search(config, params, enc, beam=beam, max_len=max_len)
        hyps.append(vocab.decode(result.tokens))
    return hyps


def task_reports(task, refs: list[list[str]], hyps: list[list[str]]):
    if task == "asr":
        return {"wer": corpus_wer(refs, hyps)}
    if task == "summarization":
        return {f"rouge-{k}": corpus_rouge(refs, hyps, k) for k in ("1", "2", "l")}
    if task == "concepts":
        return corpus_concept_prf(hyps, refs)
    raise ValueError(f"unknown task {task!r}")


def primary_metric(task: str, reports: dict[str, MetricReport]) -> float:
    key = {"asr": "wer", "summarization": "rouge-l", "concepts": "f1"}[task]
    return reports[key].value


def evaluate_params(
    config: ModelConfig,
    params: ModelParams,
    vocab: Vocabulary,
    manifest_path,
    records,
    task: str,
    beam: int,
    max_input_frames: int = 10000,
    max_len: Optional[int] = None,
    oracle: bool = False,
):
    """Score a record set; ``oracle`` skips decoding and scores the gold
    targets against themselves (metric plumbing check)."""
    if not records:
        raise ValueError(f"no records to evaluate in {manifest_path}")
    refs = [tokenize(rec.target_text(task)) for rec in records]
    if oracle:
        hyps = [list(r) for r in refs]
    else:
        if max_len is None:
            max_len = default_max_len([len(r) for r in refs])
        hyps = decode_records(
            config, params, vocab, manifest_path, records, beam, max_len,
            max_input_frames,
        )
    return task_reports(task, refs, hyps), hyps


def evaluate_checkpoint(
    ckpt,
    manifest_path,
    task: str,
    beam: int,
    max_input_frames: int = 10000,
    oracle: bool = False,
):
    """Evaluate a loaded checkpoint on a manifest."""
    from .model import init_params

    vocab = Vocabulary.from_json(ckpt.meta["vocab"])
    if len(vocab) != ckpt.config.vocab_size:
        raise ValueError(
            f"checkpoint vocab has {len(vocab)} entries, config says "
            f"{ckpt.config.vocab_size}"
        )
    params = init_params(ckpt.config, seed=0)
    for name, arr in ckpt.params.items():
        params[name].data[...] = arr
    records = read_manifest(manifest_path)
    return evaluate_params(
        ckpt.config, params, vocab, manifest_path, records, task,
        beam=beam, max_input_frames=max_input_frames, oracle=oracle,
    )

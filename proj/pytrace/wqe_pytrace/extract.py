"""Force-decoding extractor for decoder-only Hugging Face causal LMs.

Writes summary traces; full distributions are not kept for real vocabularies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch

from .schema import ModelMeta, SummaryTrace, Token, write_summary_traces

LOG2 = math.log(2.0)
PROB_FLOOR = 1e-12


@dataclass
class Segment:
    segment_id: str
    prompt_ids: list[int]
    target_ids: list[int]
    # Character offsets of each target token in the MT text; None marks a special token.
    offsets: list[Optional[tuple[int, int]]]
    texts: list[str] = field(default_factory=list)


@dataclass
class ExtractorJob:
    output: Path
    mcd_passes: int = 10
    logit_scale: float = 1.0
    device: str = "cpu"
    seed: int = 0


def _final_norm(model) -> Callable[[torch.Tensor], torch.Tensor]:
    for path in ("transformer.ln_f", "model.norm", "model.final_layernorm", "gpt_neox.final_layer_norm"):
        obj = model
        try:
            for part in path.split("."):
                obj = getattr(obj, part)
        except AttributeError:
            continue
        return obj
    raise ValueError("unsupported architecture: no final normalization layer found")


def _has_dropout(model) -> bool:
    return any(isinstance(m, torch.nn.Dropout) and m.p > 0 for m in model.modules())


def _entropy_bits(logp: torch.Tensor) -> torch.Tensor:
    return -(logp.exp() * logp).sum(-1).clamp_min(0) / LOG2


def _surprisal(logp: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    chosen = logp.gather(-1, ids.unsqueeze(-1)).squeeze(-1)
    return -chosen.exp().clamp_min(PROB_FLOOR).log()


@torch.no_grad()
def summarize_segment(model, seg: Segment, job: ExtractorJob) -> SummaryTrace:
    if len(seg.offsets) != len(seg.target_ids):
        raise ValueError(f"{seg.segment_id}: {len(seg.offsets)} offsets for {len(seg.target_ids)} target tokens")
    if not seg.prompt_ids:
        raise ValueError(f"{seg.segment_id}: empty prompt; at least a BOS token is required")
    cfg = model.config
    num_layers = cfg.num_hidden_layers
    meta = ModelMeta(num_layers, cfg.num_attention_heads, cfg.vocab_size, "decoder_only")

    ids = torch.tensor([seg.prompt_ids + seg.target_ids], device=job.device)
    p = len(seg.prompt_ids)
    positions = torch.arange(p - 1, p - 1 + len(seg.target_ids), device=job.device)
    chosen = torch.tensor(seg.target_ids, device=job.device)

    model.eval()
    out = model(ids, output_hidden_states=True, output_attentions=True)
    logp = torch.log_softmax(out.logits[0, positions].double() * job.logit_scale, -1)
    surprisal = _surprisal(logp, chosen)
    entropy = _entropy_bits(logp)

    norm = _final_norm(model)
    head = model.get_output_embeddings()
    layer_logp = []
    for layer in range(num_layers):
        h = out.hidden_states[layer + 1][0, positions]
        # The last hidden state already carries the final normalization.
        h = h if layer == num_layers - 1 else norm(h)
        layer_logp.append(torch.log_softmax(head(h).double() * job.logit_scale, -1))
    ll_surprisal = torch.stack([_surprisal(lp, chosen) for lp in layer_logp], -1)
    ll_kl = torch.stack([(lp.exp() * (lp - logp.clamp_min(math.log(PROB_FLOOR)))).sum(-1).clamp_min(0)
                         for lp in layer_logp], -1)
    hits = torch.stack([lp.argmax(-1) == chosen for lp in layer_logp], -1)
    depth = torch.where(hits.any(-1), hits.double().argmax(-1), torch.full_like(chosen, num_layers).double())

    attn_avg, attn_max = None, None
    if out.attentions is not None:
        ents = []
        for layer_attn in out.attentions:
            rows = layer_attn[0][:, positions].double()  # [heads, steps, context]
            ents.append(-(rows * rows.clamp_min(1e-300).log2()).sum(-1).clamp_min(0))
        stacked = torch.cat(ents, 0)  # [layers * heads, steps]
        attn_avg, attn_max = stacked.mean(0), stacked.max(0).values

    mcd_avg, mcd_var = None, None
    if job.mcd_passes >= 2 and _has_dropout(model):
        torch.manual_seed(job.seed)
        model.train()
        samples = []
        for _ in range(job.mcd_passes):
            lp = torch.log_softmax(model(ids).logits[0, positions].double() * job.logit_scale, -1)
            samples.append(_surprisal(lp, chosen))
        model.eval()
        s = torch.stack(samples, 0)
        mcd_avg, mcd_var = s.mean(0), s.var(0, unbiased=False)

    tokens, steps = [], []
    for i, off in enumerate(seg.offsets):
        text = seg.texts[i] if i < len(seg.texts) else ""
        if off is None:
            tokens.append(Token(text, special=True))
            continue
        tokens.append(Token(text, off[0], off[1]))
        step = {
            "surprisal": float(surprisal[i]),
            "entropy": float(entropy[i]),
            "ll_surprisal": [float(x) for x in ll_surprisal[i]],
            "ll_kl": [float(x) for x in ll_kl[i]],
            "pred_depth": float(depth[i]),
        }
        if attn_avg is not None:
            step["attn_entropy_avg"] = float(attn_avg[i])
            step["attn_entropy_max"] = float(attn_max[i])
        if mcd_avg is not None:
            step["mcd_avg"] = float(mcd_avg[i])
            step["mcd_var"] = float(mcd_var[i])
        steps.append(step)
    return SummaryTrace(seg.segment_id, meta, tokens, steps)


def extract_traces(model, segments: Sequence[Segment], job: ExtractorJob) -> list[SummaryTrace]:
    model.to(job.device)
    traces = [summarize_segment(model, seg, job) for seg in segments]
    write_summary_traces(job.output, traces)
    return traces

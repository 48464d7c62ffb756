"""Layer sweeps and metrics: swap change rates and progressive drop accuracy.

Per-sample work runs through ``parallel.ordered_map`` and is reduced in
(sample, layer) order, so reports are byte-identical for any ``jobs``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

from .config import MAX_NEW_TOKENS
from .errors import ContractError, LayerRangeError, WorkbenchError
from .intervene import DropSpec, SwapSpec, VisionTrunk, source_cache, splice_swap
from .model import ModelLike, generate_from_cache, prefill_context
from .parallel import ordered_map
from .reports import ChangeRateReport, DropRow, DropSweepReport, LayerRate
from .taskgen import AnswerSample, PairedSample, Task, parse_box, parse_task
from .tokenizer import decode

logger = logging.getLogger(__name__)

Box = Sequence[int]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _check_box(box: Box) -> tuple[int, int, int, int]:
    if box is None or len(box) != 4:
        raise ContractError(f"box must have four coordinates, got {box!r}")
    x1, y1, x2, y2 = (int(v) for v in box)
    if min(x1, y1) < 0 or x1 > x2 or y1 > y2:
        raise ContractError(f"malformed box {tuple(box)}: need 0 <= x1 <= x2 and 0 <= y1 <= y2")
    return x1, y1, x2, y2


def iou(box_a: Box, box_b: Box) -> float:
    """Intersection over union of inclusive grid boxes, in cell units."""
    ax1, ay1, ax2, ay2 = _check_box(box_a)
    bx1, by1, bx2, by2 = _check_box(box_b)
    iw = min(ax2, bx2) - max(ax1, bx1) + 1
    ih = min(ay2, by2) - max(ay1, by1) + 1
    inter = max(0, iw) * max(0, ih)
    union = (ax2 - ax1 + 1) * (ay2 - ay1 + 1) + (bx2 - bx1 + 1) * (by2 - by1 + 1) - inter
    return inter / union


def parse_count(text: str) -> int | None:
    text = text.strip()
    return int(text) if text.isdigit() else None


def _box_hit(text: str, truth: str, threshold: float = 0.5) -> bool:
    predicted = parse_box(text)
    if predicted is None:
        return False
    try:
        return iou(predicted, parse_box(truth)) > threshold
    except ContractError:
        return False


def is_parse_failure(task: Task | str, text: str) -> bool:
    task = parse_task(task)
    if task is Task.COUNT:
        return parse_count(text) is None
    if task is Task.GROUNDING:
        return parse_box(text) is None
    return False


def _ocr_changed(baseline_out: str, swapped_out: str, sample: PairedSample) -> bool:
    return baseline_out != swapped_out


def _count_changed(baseline_out: str, swapped_out: str, sample: PairedSample) -> bool:
    before, after = parse_count(baseline_out), parse_count(swapped_out)
    return before is not None and after is not None and before != after


def _recognition_changed(baseline_out: str, swapped_out: str, sample: PairedSample) -> bool:
    return swapped_out == "no"


def _grounding_changed(baseline_out: str, swapped_out: str, sample: PairedSample) -> bool:
    return _box_hit(swapped_out, sample.source_truth)


_CHANGE_RULES: dict[Task, Callable[[str, str, PairedSample], bool]] = {
    Task.OCR: _ocr_changed,
    Task.COUNT: _count_changed,
    Task.RECOGNITION: _recognition_changed,
    Task.GROUNDING: _grounding_changed,
}


def score_change(task: Task | str, baseline_out: str, swapped_out: str, sample: PairedSample) -> bool:
    """Whether a swap changed the answer, judged by the task's rule.

    An output identical to the unswapped one never counts as changed, which
    keeps the baseline rate at zero for every task.
    """
    rule = _CHANGE_RULES[parse_task(task)]
    if swapped_out == baseline_out:
        return False
    return rule(baseline_out, swapped_out, sample)


def is_correct(task: Task | str, output: str, truth: str) -> bool:
    """Exact match; grounding needs IoU > 0.5 against the truth box."""
    if parse_task(task) is Task.GROUNDING:
        return _box_hit(output, truth)
    return output == truth


def _with_sample_id(sample_id: str, exc: WorkbenchError) -> WorkbenchError:
    return exc.__class__(f"sample {sample_id}: {exc}")


# ---------------------------------------------------------------------------
# Swap probe
# ---------------------------------------------------------------------------

@dataclass
class _SwapOutcome:
    baseline_changed: bool
    changed: list[bool]
    parse_failed: list[bool]


def _check_layers(layers: Sequence[int], n_layers: int, upper: int) -> list[int]:
    if not layers:
        raise ContractError("layer list is empty")
    bad = [k for k in layers if not 0 <= k <= upper]
    if bad:
        raise LayerRangeError(f"layers {bad} outside [0, {upper}] for a {n_layers}-layer model")
    return sorted(set(int(k) for k in layers))


def change_rate_sweep(
    model: ModelLike,
    samples: Sequence[PairedSample],
    layers: Sequence[int],
    max_new: int = MAX_NEW_TOKENS,
    jobs: int = 1,
    null_source: bool = False,
    seed: int = 0,
    on_progress: Callable[[int, int], None] | None = None,
) -> ChangeRateReport:
    """Swap each sample's layer-k vision rows for every k and count changed answers.

    Target and source are prefilled once per sample; every layer splices into
    a copy of the target context cache.
    """
    if not samples:
        raise ContractError("change-rate sweep needs at least one sample")
    tasks = {s.task for s in samples}
    if len(tasks) != 1:
        raise ContractError(f"samples mix tasks {sorted(t.value for t in tasks)}")
    task = tasks.pop()
    config = model.config
    layers = _check_layers(layers, config.n_layers, config.n_layers - 1)

    def run(sample: PairedSample) -> _SwapOutcome:
        try:
            cache, query = prefill_context(model, sample.target_sequence(config))
            baseline = decode(generate_from_cache(model, cache.copy(), query, max_new))
            source = None if null_source else source_cache(model, sample.source_sequence(config))
            changed, failed = [], []
            for k in layers:
                spliced = splice_swap(cache, SwapSpec(k, source))
                swapped = decode(generate_from_cache(model, spliced, query, max_new))
                changed.append(score_change(task, baseline, swapped, sample))
                failed.append(is_parse_failure(task, swapped))
                logger.debug("%s layer %d: %r -> %r", sample.sample_id, k, baseline, swapped)
            return _SwapOutcome(score_change(task, baseline, baseline, sample), changed, failed)
        except WorkbenchError as exc:
            raise _with_sample_id(sample.sample_id, exc) from exc

    logger.info("Swap sweep: task=%s samples=%d layers=%s", task.value, len(samples), layers)
    outcomes = ordered_map(run, samples, jobs, on_progress)

    n = len(samples)
    rows = []
    for i, k in enumerate(layers):
        changed = sum(o.changed[i] for o in outcomes)
        failures = sum(o.parse_failed[i] for o in outcomes)
        if failures:
            logger.warning("Layer %d: %d of %d swapped outputs did not parse", k, failures, n)
        rows.append(LayerRate(k, n, changed, failures))
    baseline = LayerRate(-1, n, sum(o.baseline_changed for o in outcomes))
    report = ChangeRateReport(
        task=task.value,
        n_layers=config.n_layers,
        seed=seed,
        config_hash=config.config_hash(),
        source="null" if null_source else "image",
        baseline=baseline,
        rows=rows,
    )
    peak = max(rows, key=lambda r: r.rate)
    logger.info("Swap sweep %s: peak %.1f%% at layer %d", task.value, peak.rate, peak.layer)
    return report


# ---------------------------------------------------------------------------
# Accuracy and drop sweep
# ---------------------------------------------------------------------------

def _drop_predictions(
    model: ModelLike,
    sample: AnswerSample,
    drop_points: Sequence[int],
    max_new: int,
) -> list[str]:
    """Greedy answers with vision dropped from each layer in ``drop_points``.

    One recorded prefill of the prompt context serves every drop point.
    """
    seq = sample.sequence(model.config, with_answer=False)
    if len(seq) < 2 or len(seq) - 1 < seq.vision_span[1]:
        raise ContractError("generation needs at least one prompt token after the vision span")
    trunk = VisionTrunk(model, seq.prefix(len(seq) - 1))
    query_position = int(seq.position_ids()[-1])
    outputs = []
    for k in drop_points:
        cache, _ = trunk.prefill_with_drop(DropSpec(k))
        cache.next_position = query_position
        outputs.append(decode(generate_from_cache(model, cache, seq.tokens[-1], max_new)))
    return outputs


def predict(model: ModelLike, sample: AnswerSample, max_new: int = MAX_NEW_TOKENS, drop_from: int | None = None) -> str:
    k = model.config.n_layers if drop_from is None else drop_from
    return _drop_predictions(model, sample, [k], max_new)[0]


def evaluate_counts(
    model: ModelLike,
    samples: Sequence[AnswerSample],
    max_new: int = MAX_NEW_TOKENS,
    jobs: int = 1,
    drop_from: int | None = None,
) -> dict[str, tuple[int, int]]:
    """Per-task (correct, total) under greedy decoding."""
    def run(sample: AnswerSample) -> bool:
        try:
            return is_correct(sample.task, predict(model, sample, max_new, drop_from), sample.answer_text)
        except WorkbenchError as exc:
            raise _with_sample_id(sample.sample_id, exc) from exc

    hits = ordered_map(run, samples, jobs)
    counts: dict[str, tuple[int, int]] = {}
    for sample, hit in zip(samples, hits):
        correct, total = counts.get(sample.task.value, (0, 0))
        counts[sample.task.value] = (correct + int(hit), total + 1)
    return dict(sorted(counts.items()))


def evaluate(
    model: ModelLike,
    samples: Sequence[AnswerSample],
    max_new: int = MAX_NEW_TOKENS,
    jobs: int = 1,
    drop_from: int | None = None,
) -> dict[str, float]:
    """Per-task accuracy in percent."""
    return {
        task: 100.0 * correct / total
        for task, (correct, total) in evaluate_counts(model, samples, max_new, jobs, drop_from).items()
    }


def drop_sweep(
    model: ModelLike,
    samples: Sequence[AnswerSample],
    k_list: Sequence[int],
    max_new: int = MAX_NEW_TOKENS,
    jobs: int = 1,
    seed: int = 0,
    on_progress: Callable[[int, int], None] | None = None,
) -> DropSweepReport:
    """Accuracy with vision dropped from each layer k; the baseline is the unintervened model."""
    if not k_list:
        raise ContractError("drop sweep needs at least one drop point")
    if any(b <= a for a, b in zip(k_list, k_list[1:])):
        raise ContractError(f"drop points must be strictly increasing, got {list(k_list)}")
    if not samples:
        raise ContractError("drop sweep needs at least one sample")
    config = model.config
    ks = _check_layers(k_list, config.n_layers, config.n_layers)
    points = ks + [config.n_layers]

    def run(sample: AnswerSample) -> list[bool]:
        try:
            outputs = _drop_predictions(model, sample, points, max_new)
        except WorkbenchError as exc:
            raise _with_sample_id(sample.sample_id, exc) from exc
        return [is_correct(sample.task, out, sample.answer_text) for out in outputs]

    tasks = sorted({s.task.value for s in samples})
    logger.info("Drop sweep: tasks=%s samples=%d k=%s", tasks, len(samples), ks)
    hits = ordered_map(run, samples, jobs, on_progress)

    n = len(samples)
    rows = [
        DropRow(k, config.n_layers - k, n, sum(h[i] for h in hits))
        for i, k in enumerate(ks)
    ]
    baseline = DropRow(config.n_layers, 0, n, sum(h[-1] for h in hits))
    return DropSweepReport(
        tasks=tasks,
        n_layers=config.n_layers,
        seed=seed,
        config_hash=config.config_hash(),
        baseline=baseline,
        rows=rows,
    )


__all__ = [
    "change_rate_sweep",
    "drop_sweep",
    "evaluate",
    "evaluate_counts",
    "iou",
    "is_correct",
    "is_parse_failure",
    "parse_count",
    "predict",
    "score_change",
]

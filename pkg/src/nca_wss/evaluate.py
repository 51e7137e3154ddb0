"""IoU metrics, per-dataset reports and the train x test cross-domain grid."""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_mask_pair
from .data import load_image, load_mask, save_mask
from .model import forward_batch
from .segment import extract_mask
from .train import sample_seed

log = logging.getLogger(__name__)

# Published mean +- std IoU (percent): rows = training set, columns = test set.
PUBLISHED_IOU = {
    "raabin": {"raabin": (49.6, 1.8), "matek19": (64.9, 1.4), "int25": (27.6, 6.1)},
    "matek19": {"raabin": (55.1, 2.0), "matek19": (82.6, 2.0), "int25": (63.7, 4.3)},
}


def iou(pred, truth):
    """Foreground intersection over union; two empty masks score 1.0."""
    pred, truth = check_mask_pair(pred, truth)
    union = np.count_nonzero(pred | truth)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & truth) / union


def mean_class_iou(pred, truth):
    """Average of foreground and background IoU."""
    pred, truth = check_mask_pair(pred, truth)
    return 0.5 * (iou(pred, truth) + iou(~pred, ~truth))


@dataclass
class EvalReport:
    per_image_iou: list  # [(sample id, iou)]
    mean_iou: float
    std_iou: float
    run_id: str = "run0"
    train_dataset: str = ""
    test_dataset: str = ""
    skipped: list = field(default_factory=list)  # ids whose mask file was missing/unreadable
    degenerate: list = field(default_factory=list)  # ids whose state had no variance
    accuracy: float | None = None
    pooled_iou: float | None = None  # dataset-pooled pixel IoU
    run_means: list = field(default_factory=list)
    single_run: bool = True

    @property
    def n_images(self):
        return len(self.per_image_iou)

    def to_records(self):
        """Line-delimited JSON: one record per image, then a summary record."""
        lines = [
            json.dumps({"type": "image", "run": self.run_id, "train": self.train_dataset,
                        "test": self.test_dataset, "id": sid, "iou": value})
            for sid, value in self.per_image_iou
        ]
        summary = {k: v for k, v in asdict(self).items() if k != "per_image_iou"}
        summary["type"] = "summary"
        summary["n_images"] = self.n_images
        lines.append(json.dumps(summary))
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_records())

    @classmethod
    def read(cls, path):
        per_image, summary = [], None
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            if rec["type"] == "image":
                per_image.append((rec["id"], rec["iou"]))
            else:
                summary = rec
        summary.pop("type")
        summary.pop("n_images")
        return cls(per_image_iou=per_image, **summary)


def report_from_scores(scores, run_id="run0", train_dataset="", test_dataset="", **extra):
    values = np.array([v for _, v in scores], dtype=np.float64)
    mean = float(values.mean()) if values.size else float("nan")
    std = float(values.std()) if values.size else float("nan")
    return EvalReport(list(scores), mean, std, run_id, train_dataset, test_dataset, run_means=[mean], **extra)


def merge_reports(reports, run_id="merged"):
    """Combine runs: mean and sample standard deviation (ddof=1) of the run means."""
    if not reports:
        raise ValueError("nothing to merge")
    means = [m for r in reports for m in (r.run_means or [r.mean_iou])]
    single = len(means) == 1
    first = reports[0]
    accs = [r.accuracy for r in reports if r.accuracy is not None]
    return EvalReport(
        per_image_iou=[item for r in reports for item in r.per_image_iou],
        mean_iou=float(np.mean(means)),
        std_iou=0.0 if single else float(np.std(means, ddof=1)),
        run_id=run_id,
        train_dataset=first.train_dataset,
        test_dataset=first.test_dataset,
        skipped=[s for r in reports for s in r.skipped],
        degenerate=[s for r in reports for s in r.degenerate],
        accuracy=float(np.mean(accs)) if accs else None,
        pooled_iou=None,
        run_means=means,
        single_run=single,
    )


def segment_batch(images, ids, params, config, keep_largest=False):
    """Forward + mask extraction for a stack of images; returns (logits, [Segmentation])."""
    seeds = [sample_seed(config.seed, sid) for sid in ids]
    logits, _, states = forward_batch(images, params, config.steps, config.fire_rate, seeds,
                                    config.seg_state_index, config.inference_mode)
    return logits, [extract_mask(s, config.otsu_bins, keep_largest) for s in states]


def segment_manifest(params, manifest, config, keep_largest=False, jobs=1, entries=None):
    """Yield ``(entry, image, logits, Segmentation)`` in manifest order."""
    entries = manifest.entries if entries is None else entries
    chunks = [entries[i : i + config.chunk_size] for i in range(0, len(entries), config.chunk_size)]

    def run(chunk):
        images = np.stack([load_image(manifest.resolve(e.image), config.image_size) for e in chunk])
        logits, segs = segment_batch(images, [e.id for e in chunk], params, config, keep_largest)
        return chunk, images, logits, segs

    results = ThreadPoolExecutor(jobs).map(run, chunks) if jobs > 1 else map(run, chunks)
    for chunk, images, logits, segs in results:
        yield from zip(chunk, images, logits, segs)


def evaluate(params, manifest, config, run_id="run0", train_dataset="", iou_mode="foreground",
             keep_largest=False, jobs=1, masks_dir=None):
    """Score every manifest sample that has a ground-truth mask."""
    metric = iou if iou_mode == "foreground" else mean_class_iou
    scored, skipped = [], []
    for e in manifest.entries:
        if e.mask is None:
            continue
        if not manifest.resolve(e.mask).exists():
            log.warning("%s: mask file %s missing, sample skipped", e.id, e.mask)
            skipped.append(e.id)
            continue
        scored.append(e)
    scores, degenerate, correct, labelled = [], [], 0, 0
    inter = union = 0
    for e, _, logits, seg in segment_manifest(params, manifest, config, keep_largest, jobs, scored):
        try:
            truth = load_mask(manifest.resolve(e.mask), config.image_size)
        except OSError as exc:
            log.warning("%s: %s, sample skipped", e.id, exc)
            skipped.append(e.id)
            continue
        scores.append((e.id, float(metric(seg.mask, truth))))
        inter += np.count_nonzero(seg.mask & truth)
        union += np.count_nonzero(seg.mask | truth)
        if seg.degenerate:
            degenerate.append(e.id)
        if e.label is not None:
            labelled += 1
            correct += int(np.argmax(logits) == e.label)
        if masks_dir is not None:
            save_mask(seg.mask, Path(masks_dir) / f"{e.id}.png")
    scores.sort(key=lambda item: item[0])
    return report_from_scores(
        scores,
        run_id=run_id,
        train_dataset=train_dataset,
        test_dataset=manifest.dataset_id,
        skipped=skipped,
        degenerate=degenerate,
        accuracy=correct / labelled if labelled else None,
        pooled_iou=inter / union if union else 1.0,
    )


def cross_domain(models, manifests, **kwargs):
    """Evaluate trained models on every test manifest.

    ``models`` maps a training-set id to a list of ``(run_id, params, config)``
    (one entry per fold or seed). Returns ``{train_id: {test_id: EvalReport}}``
    with run-merged reports. Mask-only datasets can only appear as columns.
    """
    grid = {}
    for train_id, runs in models.items():
        row = {}
        for manifest in manifests:
            reports = [evaluate(p, manifest, c, run_id=rid, train_dataset=train_id, **kwargs) for rid, p, c in runs]
            merged = merge_reports(reports, run_id=f"{train_id}->{manifest.dataset_id}")
            merged.train_dataset = train_id
            merged.test_dataset = manifest.dataset_id
            row[manifest.dataset_id] = merged
        grid[train_id] = row
    return grid


def _cell(report):
    if report.single_run:
        return f"{100 * report.mean_iou:.1f}"
    return f"{100 * report.mean_iou:.1f} ± {100 * report.std_iou:.1f}"


def summary_table(grid, reference=PUBLISHED_IOU):
    """Plain-text IoU table (percent), rows = train set, columns = test set."""
    columns = []
    for row in grid.values():
        columns += [c for c in row if c not in columns]
    width = max([12] + [len(c) + 2 for c in columns])
    lines = ["Train \\ Test".ljust(14) + "".join(c.ljust(width + 16) for c in columns)]
    for train_id, row in grid.items():
        cells = []
        for c in columns:
            text = _cell(row[c]) if c in row else "-"
            ref = reference.get(train_id.lower(), {}).get(c.lower())
            if ref is not None:
                text += f" (published {ref[0]} ± {ref[1]})"
            cells.append(text.ljust(width + 16))
        lines.append(train_id.ljust(14) + "".join(cells))
    return "\n".join(lines)

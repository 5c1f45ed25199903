"""JSON-lines detection and ground-truth files."""

from __future__ import annotations

import json

from .data import FormatError, _atomic_write
from .evaluation import DetectionRecord, GroundTruth

DET_FIELDS = {"image_id", "bbox", "score", "label", "uncertainty"}
DET_REQUIRED = {"image_id", "bbox", "score", "label"}
GT_FIELDS = {"image_id", "bbox", "label"}


def _parse(path, fields, required, build):
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{n}: malformed JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise FormatError(f"{path}:{n}: expected a JSON object")
            unknown = set(obj) - fields
            if unknown:
                raise FormatError(f"{path}:{n}: unknown field(s) {sorted(unknown)}")
            missing = required - set(obj)
            if missing:
                raise FormatError(f"{path}:{n}: missing field(s) {sorted(missing)}")
            if (not isinstance(obj["image_id"], int) or not isinstance(obj["label"], int)
                    or not isinstance(obj["bbox"], list) or len(obj["bbox"]) != 4):
                raise FormatError(f"{path}:{n}: image_id/label must be ints and bbox a list of 4")
            try:
                out.append(build(obj))
            except (TypeError, ValueError) as e:
                raise FormatError(f"{path}:{n}: {e}") from None
    return out


def read_detection_records(path) -> list:
    return _parse(path, DET_FIELDS, DET_REQUIRED, lambda o: DetectionRecord(
        o["image_id"], o["bbox"], float(o["score"]), o["label"],
        None if o.get("uncertainty") is None else float(o["uncertainty"])))


def read_ground_truths(path) -> list:
    return _parse(path, GT_FIELDS, GT_FIELDS, lambda o: GroundTruth(o["image_id"], o["bbox"], o["label"]))


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def write_detection_records(path, records) -> None:
    lines = []
    for r in records:
        d = {"image_id": r.image_id, "bbox": list(r.bbox), "score": r.score, "label": r.label}
        if r.uncertainty is not None:
            d["uncertainty"] = r.uncertainty
        lines.append(_dump(d))
    _atomic_write(path, ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


def write_ground_truths(path, records) -> None:
    lines = [_dump({"image_id": g.image_id, "bbox": list(g.bbox), "label": g.label}) for g in records]
    _atomic_write(path, ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))

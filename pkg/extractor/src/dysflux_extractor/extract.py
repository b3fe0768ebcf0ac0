"""Extraction jobs: manifest in, one .dyfh per clip out, JSON log alongside."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .audio import AudioError, load_clip, normalize
from .backbone import Backbone, EXPECTED_DIM, EXPECTED_LAYERS
from .dyfh import feature_path, peek_header, write_dyfh

logger = logging.getLogger("dysflux_extractor")


@dataclass
class ExtractionJob:
    manifest_path: str
    audio_dir: str
    out_dir: str
    backbone: str = "english-asr-base"
    sample_rate: int = 16000
    jobs: int = 1
    seed: int = 0


@dataclass
class ExtractionResult:
    written: list = field(default_factory=list)
    skipped: list = field(default_factory=list)       # valid output already present
    failed: list = field(default_factory=list)        # (clip_id, reason)
    frames: dict = field(default_factory=dict)        # clip_id -> T

    @property
    def ok(self):
        return not self.failed


def read_manifest_clips(path):
    """Clip ids from a dysflux JSON-lines manifest (line 1 is the header)."""
    clip_ids = []
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    for lineno, line in enumerate(lines[1:], start=2):
        obj = json.loads(line)
        if "clip_id" not in obj:
            raise ValueError(f"{path}: line {lineno} has no clip_id")
        clip_ids.append(obj["clip_id"])
    return clip_ids


def _audio_path(job, clip_id):
    return os.path.join(job.audio_dir, clip_id + ".wav")


def _existing_is_valid(path, clip_id):
    header = peek_header(path)
    if header is None:
        return False
    got_id, n_layers, _frames, dim = header
    return got_id == clip_id and n_layers == EXPECTED_LAYERS and dim == EXPECTED_DIM


def extract(job: ExtractionJob):
    """Run the backbone over every manifest clip; idempotent per output file."""
    clip_ids = read_manifest_clips(job.manifest_path)
    os.makedirs(job.out_dir, exist_ok=True)
    backbone = Backbone.load(job.backbone, seed=job.seed)
    result = ExtractionResult()

    def process(clip_id):
        out_path = feature_path(job.out_dir, clip_id)
        if _existing_is_valid(out_path, clip_id):
            return clip_id, "skipped", peek_header(out_path)[2], None
        try:
            waveform = load_clip(_audio_path(job, clip_id), target_rate=job.sample_rate)
            values = backbone.hidden_states(normalize(waveform))
            write_dyfh(out_path, clip_id, values)
            return clip_id, "written", values.shape[1], None
        except (AudioError, OSError, RuntimeError, ValueError) as exc:
            return clip_id, "failed", None, str(exc)

    if job.jobs > 1:
        with ThreadPoolExecutor(max_workers=job.jobs) as pool:
            outcomes = list(pool.map(process, clip_ids))
    else:
        outcomes = [process(cid) for cid in clip_ids]

    log = {}
    for clip_id, status, frames, error in outcomes:
        entry = {"status": status}
        if frames is not None:
            entry["frames"] = int(frames)
            result.frames[clip_id] = int(frames)
        if error is not None:
            entry["error"] = error
            logger.warning("clip %s failed: %s", clip_id, error)
        log[clip_id] = entry
        getattr(result, "failed" if status == "failed" else status).append(
            (clip_id, error) if status == "failed" else clip_id
        )

    log_path = os.path.join(job.out_dir, "extraction_log.json")
    with open(log_path, "w", encoding="utf-8") as fh:
        json.dump({
            "backbone": job.backbone,
            "sample_rate": job.sample_rate,
            "clips": log,
            "written": len(result.written),
            "skipped": len(result.skipped),
            "failed": len(result.failed),
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return result

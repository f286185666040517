"""
Pseudo-label curation as deterministic manifest orchestration.

This module provides:
1. SampleRecord / SampleManifest - JSONL manifests with provenance sidecars
2. CommandRunner - external labeler/scorer processes with retry and back-off
3. invoke_labeler / score_samples / select_top_k / mix_datasets - stage operations
4. StageConfig / PipelineConfig / run_pipeline - ordered, idempotent stage execution
"""

import hashlib
import json
import logging
import math
import os
import re
import shlex
import string
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ArgumentError, ConfigError, FormatError, PanoDepthError, StageFailure

LOGGER = logging.getLogger(__name__)

DOMAINS = ("indoor", "outdoor")
SOURCES = ("synthetic", "real", "generated")

LABELER_PLACEHOLDERS = ("input_list_path", "output_dir")
SCORER_PLACEHOLDERS = ("pair_list_path",)
OPTIONAL_PLACEHOLDERS = ("python",)

STATE_FILE = "pipeline_state.json"
RUN_LOG_FILE = "run_log.jsonl"
OUTPUT_MANIFEST = "output.jsonl"

_ID_PATTERN = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._@#+-]*$")
_STAGE_PATTERN = re.compile(r"^[a-z0-9][a-z0-9_-]*$")


def sanitize_record_id(record_id: str) -> str:
    """Ids become file names (<id>.pfm), so only a safe character set is allowed."""
    if not isinstance(record_id, str) or not _ID_PATTERN.match(record_id):
        raise ArgumentError(
            f"Invalid record id {record_id!r}. "
            "Use letters, digits and . _ @ # + - (not leading)."
        )
    return record_id


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_hash(path: Path) -> str:
    return _sha256(Path(path).read_bytes())


def canonical_hash(obj) -> str:
    return _sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8"))


# ==============================================================================
# RECORDS AND MANIFESTS
# ==============================================================================

@dataclass(frozen=True)
class SampleRecord:
    id: str
    image_path: str
    domain: str
    source: str
    depth_path: Optional[str] = None
    score: Optional[float] = None
    stage_tag: str = ""

    def __post_init__(self):
        sanitize_record_id(self.id)
        if self.domain not in DOMAINS:
            raise ArgumentError(f"Record {self.id}: domain must be one of {DOMAINS}, got {self.domain!r}.")
        if self.source not in SOURCES:
            raise ArgumentError(f"Record {self.id}: source must be one of {SOURCES}, got {self.source!r}.")
        if self.score is not None:
            score = float(self.score)
            if not math.isfinite(score):
                raise ArgumentError(f"Record {self.id}: score must be finite.")
            object.__setattr__(self, "score", score)

    def to_dict(self, base_dir: Optional[Path] = None) -> dict:
        data = asdict(self)
        if base_dir is not None:
            for key in ("image_path", "depth_path"):
                if data[key] is not None:
                    data[key] = Path(os.path.relpath(data[key], base_dir)).as_posix()
        return data

    @classmethod
    def from_dict(cls, data: dict, base_dir: Optional[Path] = None) -> "SampleRecord":
        data = dict(data)
        if base_dir is not None:
            for key in ("image_path", "depth_path"):
                if data.get(key) is not None:
                    data[key] = str((base_dir / data[key]).resolve())
        return cls(**data)


@dataclass(frozen=True)
class SampleManifest:
    """Ordered records plus a provenance mapping (creating stage, hashes, seed)."""
    records: Tuple[SampleRecord, ...] = ()
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        records = tuple(self.records)
        seen = set()
        for record in records:
            if record.id in seen:
                raise ArgumentError(f"Duplicate record id '{record.id}' in manifest.")
            seen.add(record.id)
        object.__setattr__(self, "records", records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> List[str]:
        return [r.id for r in self.records]

    def sorted_by_id(self) -> "SampleManifest":
        return SampleManifest(tuple(sorted(self.records, key=lambda r: r.id)), dict(self.provenance))

    def with_provenance(self, **provenance) -> "SampleManifest":
        return SampleManifest(self.records, {**self.provenance, **provenance})

    def content_hash(self) -> str:
        return canonical_hash([r.to_dict() for r in self.records])


def provenance_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".provenance.json")


def write_manifest(manifest: SampleManifest, path) -> str:
    """
    JSON lines, paths relative to the manifest directory, plus a provenance sidecar.

    Returns:
        sha256 of the written manifest file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    lines = [json.dumps(r.to_dict(base), sort_keys=True) for r in manifest.records]
    payload = ("\n".join(lines) + "\n" if lines else "").encode("utf-8")
    path.write_bytes(payload)
    provenance_path(path).write_text(json.dumps(manifest.provenance, indent=2, sort_keys=True) + "\n")
    return _sha256(payload)


def read_manifest(path) -> SampleManifest:
    path = Path(path)
    if not path.exists():
        raise ArgumentError(f"Manifest not found: {path}")
    base = path.parent.resolve()
    records = []
    offset = 0
    for number, raw in enumerate(path.read_bytes().split(b"\n"), start=1):
        try:
            line = raw.decode("utf-8").strip()
        except UnicodeDecodeError as e:
            raise FormatError(f"Manifest line {number} is not valid UTF-8: {e.reason}", path, offset + e.start)
        if line:
            try:
                records.append(SampleRecord.from_dict(json.loads(line), base))
            except (ValueError, TypeError) as e:
                raise FormatError(f"Bad manifest record on line {number}: {e}", path, offset)
        offset += len(raw) + 1

    provenance = {}
    side = provenance_path(path)
    if side.exists():
        try:
            provenance = json.loads(side.read_text())
        except ValueError as e:
            raise FormatError(f"Bad provenance sidecar: {e}", side)
    return SampleManifest(tuple(records), provenance)


# ==============================================================================
# EXTERNAL COMMANDS
# ==============================================================================

def validate_command_template(template: str, required: Sequence[str]) -> Tuple[bool, str]:
    """
    Validates an external command template using a layered approach.

    Layers:
    1. Non-empty string
    2. Only documented placeholders ({python} plus the required ones)
    3. Every required placeholder present
    4. Shell-style tokenisation succeeds (balanced quotes)

    Returns:
        Tuple of (is_valid, error_message)
    """
    if not isinstance(template, str) or not template.strip():
        return False, "Command template must be a non-empty string."

    try:
        names = {name for _, name, _, _ in string.Formatter().parse(template) if name is not None}
    except ValueError as e:
        return False, f"Malformed placeholder: {e}"

    allowed = set(required) | set(OPTIONAL_PLACEHOLDERS)
    unknown = sorted(names - allowed)
    if unknown:
        return False, f"Unknown placeholder '{{{unknown[0]}}}'; allowed: {sorted(allowed)}."

    missing = [name for name in required if name not in names]
    if missing:
        return False, f"Missing required placeholder '{{{missing[0]}}}'."

    try:
        shlex.split(template.format(**{name: "x" for name in allowed}))
    except ValueError as e:
        return False, f"Cannot tokenise command: {e}"

    return True, ""


class CommandRunner:
    """
    Runs external commands for one stage with bounded retries.

    Failed attempts are retried after retry_delay * 2**(attempt-1) seconds.
    max_retries counts attempts, so the default of 1 never retries.
    """

    def __init__(
        self,
        stage: str,
        max_retries: int = 1,
        retry_delay: float = 1.0,
        timeout: Optional[float] = None,
    ):
        if max_retries < 1:
            raise ArgumentError("max_retries must be >= 1.")
        self.stage = stage
        self.max_retries = max_retries
        self.retry_delay = retry_delay
        self.timeout = timeout

    def build(self, template: str, **placeholders) -> List[str]:
        values = {"python": sys.executable, **placeholders}
        quoted = {key: shlex.quote(str(value)) for key, value in values.items()}
        return shlex.split(template.format(**quoted))

    def run(self, template: str, **placeholders) -> subprocess.CompletedProcess:
        args = self.build(template, **placeholders)
        command = shlex.join(args)
        last_error = None

        for attempt in range(1, self.max_retries + 1):
            LOGGER.info("[%s] running (attempt %d/%d): %s", self.stage, attempt, self.max_retries, command)
            try:
                result = subprocess.run(args, capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as e:
                last_error = StageFailure(self.stage, f"Could not run command: {e}", command=command)
            else:
                if result.returncode == 0:
                    return result
                last_error = StageFailure(
                    self.stage,
                    "External command failed",
                    command=command,
                    returncode=result.returncode,
                    stdout=result.stdout,
                    stderr=result.stderr,
                )

            if attempt < self.max_retries:
                delay = self.retry_delay * (2 ** (attempt - 1))
                LOGGER.warning("[%s] attempt %d failed; retrying in %.1fs", self.stage, attempt, delay)
                time.sleep(delay)

        raise last_error


def _batches(records: Sequence[SampleRecord], batch_size: Optional[int]) -> List[List[SampleRecord]]:
    size = batch_size or len(records)
    return [list(records[i:i + size]) for i in range(0, len(records), size)]


def _run_batches(fn, batches, workers: int) -> list:
    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as pool:
        return list(pool.map(fn, enumerate(batches)))


# ==============================================================================
# STAGE OPERATIONS
# ==============================================================================

def invoke_labeler(
    manifest: SampleManifest,
    cmd: str,
    work_dir,
    runner: Optional[CommandRunner] = None,
    workers: int = 1,
    batch_size: Optional[int] = None,
    stage_tag: str = "",
) -> SampleManifest:
    """
    Run the external depth labeler and attach its outputs.

    The labeler receives {input_list_path} (lines "id<TAB>image_path") and
    {output_dir}, and must write <id>.pfm for every image. Records without an
    output file are dropped and counted. Depth files left in work_dir by an
    earlier run are removed first, so only this run's outputs count.
    """
    if len(manifest) == 0:
        return SampleManifest((), {**manifest.provenance, "operation": "label", "skipped": []})

    ok, message = validate_command_template(cmd, LABELER_PLACEHOLDERS)
    if not ok:
        raise ConfigError("labeler", message)
    for record in manifest:
        if not Path(record.image_path).exists():
            raise ArgumentError(f"Image for record '{record.id}' not found: {record.image_path}")

    runner = runner or CommandRunner(stage_tag or "labeler")
    work_dir = Path(work_dir)
    output_dir = work_dir / "depth"
    list_dir = work_dir / "lists"
    output_dir.mkdir(parents=True, exist_ok=True)
    list_dir.mkdir(parents=True, exist_ok=True)
    for record in manifest:
        (output_dir / f"{record.id}.pfm").unlink(missing_ok=True)

    def label_batch(item):
        index, batch = item
        list_path = list_dir / f"labeler_{index:04d}.txt"
        list_path.write_text("".join(f"{r.id}\t{r.image_path}\n" for r in batch))
        runner.run(cmd, input_list_path=list_path, output_dir=output_dir)

    _run_batches(label_batch, _batches(manifest.records, batch_size), workers)

    kept, skipped = [], []
    for record in manifest:
        out = output_dir / f"{record.id}.pfm"
        if out.exists():
            kept.append(replace(record, depth_path=str(out.resolve()), stage_tag=stage_tag or record.stage_tag))
        else:
            skipped.append(record.id)

    if skipped:
        LOGGER.warning("Labeler produced no depth for %d of %d samples", len(skipped), len(manifest))
        LOGGER.debug("Skipped ids: %s", ", ".join(skipped))
    return SampleManifest(tuple(kept), {**manifest.provenance, "operation": "label", "skipped": skipped})


def _parse_scores(stdout: str, n_expected: int, stage: str, command: str) -> List[float]:
    lines = stdout.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if len(lines) != n_expected:
        raise StageFailure(
            stage, f"Scorer returned {len(lines)} scores for {n_expected} pairs", command=command, stdout=stdout
        )
    scores = []
    for number, line in enumerate(lines, start=1):
        try:
            value = float(line.strip())
        except ValueError:
            raise StageFailure(stage, f"Line {number}: {line.strip()!r} is not a number", command=command, stdout=stdout)
        if not math.isfinite(value):
            raise StageFailure(stage, f"Line {number}: score {line.strip()!r} is not finite", command=command, stdout=stdout)
        scores.append(value)
    return scores


def score_samples(
    manifest: SampleManifest,
    cmd: str,
    work_dir,
    runner: Optional[CommandRunner] = None,
    workers: int = 1,
    batch_size: Optional[int] = None,
) -> SampleManifest:
    """
    Run the external quality scorer.

    The scorer receives {pair_list_path} (lines "image_path<TAB>depth_path")
    and prints one decimal score per line, in input order.
    """
    if len(manifest) == 0:
        return SampleManifest((), {**manifest.provenance, "operation": "score"})

    ok, message = validate_command_template(cmd, SCORER_PLACEHOLDERS)
    if not ok:
        raise ConfigError("scorer", message)
    unlabeled = [r.id for r in manifest if r.depth_path is None]
    if unlabeled:
        raise ArgumentError(f"Cannot score records without depth: {', '.join(unlabeled[:5])}")

    runner = runner or CommandRunner("scorer")
    list_dir = Path(work_dir) / "lists"
    list_dir.mkdir(parents=True, exist_ok=True)

    def score_batch(item):
        index, batch = item
        list_path = list_dir / f"scorer_{index:04d}.txt"
        list_path.write_text("".join(f"{r.image_path}\t{r.depth_path}\n" for r in batch))
        result = runner.run(cmd, pair_list_path=list_path)
        return _parse_scores(result.stdout, len(batch), runner.stage, shlex.join(runner.build(cmd, pair_list_path=list_path)))

    batches = _batches(manifest.records, batch_size)
    scored = []
    for batch, scores in zip(batches, _run_batches(score_batch, batches, workers)):
        scored.extend(replace(r, score=s) for r, s in zip(batch, scores))
    return SampleManifest(tuple(scored), {**manifest.provenance, "operation": "score"})


def select_top_k(manifest: SampleManifest, k_indoor: int, k_outdoor: int) -> SampleManifest:
    """
    Top-k per domain by score (descending, ties by id ascending).

    The result is sorted by id. A k above the pool size takes the whole pool.
    """
    limits = {"indoor": k_indoor, "outdoor": k_outdoor}
    for domain, k in limits.items():
        if not isinstance(k, (int, np.integer)) or isinstance(k, bool) or k < 0:
            raise ArgumentError(f"k_{domain} must be a non-negative integer, got {k!r}.")
    unscored = [r.id for r in manifest if r.score is None]
    if unscored:
        raise ArgumentError(f"Cannot select unscored records: {', '.join(unscored[:5])}")

    selected = []
    for domain in DOMAINS:
        pool = sorted((r for r in manifest if r.domain == domain), key=lambda r: (-r.score, r.id))
        k = int(limits[domain])
        if k > len(pool):
            LOGGER.warning("k_%s=%d exceeds the pool of %d; taking all", domain, k, len(pool))
        selected.extend(pool[:k])

    provenance = {**manifest.provenance, "operation": "select", "k_indoor": int(k_indoor), "k_outdoor": int(k_outdoor)}
    return SampleManifest(tuple(sorted(selected, key=lambda r: r.id)), provenance)


def repetition_count(weight: float) -> int:
    """Nearest-integer repetition, at least 1 for any positive weight."""
    if weight <= 0:
        return 0
    return max(1, int(math.floor(weight + 0.5)))


def mix_datasets(
    inputs: Sequence[Tuple[SampleManifest, float]],
    seed: int,
    source_tags: Optional[Sequence[str]] = None,
) -> SampleManifest:
    """
    Weighted concatenation followed by a seeded shuffle.

    Ids found in more than one source get "@<tag>" (tag defaults to src<index>);
    repeated copies after the first get "#r<n>".
    """
    if not inputs:
        raise ArgumentError("mix_datasets needs at least one input.")
    weights = [float(w) for _, w in inputs]
    if any(not math.isfinite(w) or w < 0 for w in weights):
        raise ArgumentError(f"Mixing weights must be finite and >= 0, got {weights}.")
    if not any(w > 0 for w in weights):
        raise ArgumentError("At least one mixing weight must be positive.")
    tags = list(source_tags) if source_tags is not None else [f"src{i}" for i in range(len(inputs))]
    if len(tags) != len(inputs):
        raise ArgumentError("source_tags must match the number of inputs.")

    owners: Dict[str, int] = {}
    for (manifest, weight) in inputs:
        if weight > 0:
            for record_id in manifest.ids:
                owners[record_id] = owners.get(record_id, 0) + 1

    combined: List[SampleRecord] = []
    summary = []
    for (manifest, weight), tag in zip(inputs, tags):
        repeat = repetition_count(weight)
        for r in range(repeat):
            for record in manifest:
                new_id = record.id
                if owners.get(record.id, 0) > 1:
                    new_id += f"@{tag}"
                if r > 0:
                    new_id += f"#r{r}"
                combined.append(replace(record, id=new_id))
        summary.append({
            "source": tag,
            "weight": weight,
            "repeat": repeat,
            "n_records": len(manifest),
            "content_hash": manifest.content_hash(),
        })

    order = np.random.default_rng(seed).permutation(len(combined))
    mixed = tuple(combined[i] for i in order)
    return SampleManifest(mixed, {"operation": "mix", "seed": int(seed), "inputs": summary})


# ==============================================================================
# PIPELINE CONFIGURATION
# ==============================================================================

@dataclass
class MixInput:
    manifest: str
    weight: float = 1.0


@dataclass
class StageConfig:
    """
    One pipeline stage: label -> score -> select -> mix, each step optional.

    `source` and mix manifests are file paths or "@<stage-name>" references to
    an earlier stage's output.
    """
    name: str
    source: str
    labeler: Optional[str] = None
    scorer: Optional[str] = None
    k_indoor: Optional[int] = None
    k_outdoor: Optional[int] = None
    source_weight: float = 1.0
    mix: List[MixInput] = field(default_factory=list)
    seed: Optional[int] = None

    def __post_init__(self):
        self.mix = [m if isinstance(m, MixInput) else MixInput(**m) for m in self.mix]

    @property
    def selects(self) -> bool:
        return self.k_indoor is not None or self.k_outdoor is not None

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self, pipeline_seed: int) -> str:
        return canonical_hash({"stage": self.to_dict(), "pipeline_seed": pipeline_seed})


@dataclass
class PipelineConfig:
    output_dir: Path
    stages: List[StageConfig]
    seed: int = 0
    workers: int = 1
    batch_size: int = 64
    max_retries: int = 1
    retry_delay: float = 1.0
    timeout: Optional[float] = None
    base_dir: Path = Path(".")

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        self.base_dir = Path(self.base_dir)

    def resolve(self, reference: str) -> Path:
        """Path of a manifest reference ("@stage" or a path relative to base_dir)."""
        if reference.startswith("@"):
            return self.output_dir / reference[1:] / OUTPUT_MANIFEST
        path = Path(reference)
        return path if path.is_absolute() else self.base_dir / path


def validate_stage_config(stage: StageConfig) -> Tuple[bool, str]:
    """
    Validates one stage in isolation.

    Returns:
        Tuple of (is_valid, error_message); the message names the offending field
    """
    if not isinstance(stage.name, str) or not _STAGE_PATTERN.match(stage.name):
        return False, f"name: invalid stage name {stage.name!r} (lowercase letters, digits, - and _)."
    if not isinstance(stage.source, str) or not stage.source:
        return False, "source: a source manifest is required."

    if stage.labeler is not None:
        ok, message = validate_command_template(stage.labeler, LABELER_PLACEHOLDERS)
        if not ok:
            return False, f"labeler: {message}"
    if stage.scorer is not None:
        ok, message = validate_command_template(stage.scorer, SCORER_PLACEHOLDERS)
        if not ok:
            return False, f"scorer: {message}"

    if stage.selects:
        for key in ("k_indoor", "k_outdoor"):
            value = getattr(stage, key)
            if value is None:
                return False, f"{key}: both k_indoor and k_outdoor are needed for selection."
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                return False, f"{key}: must be a non-negative integer."

    weights = [stage.source_weight] + [m.weight for m in stage.mix]
    for index, weight in enumerate(weights):
        if not isinstance(weight, (int, float)) or not math.isfinite(weight) or weight < 0:
            where = "source_weight" if index == 0 else f"mix[{index - 1}].weight"
            return False, f"{where}: must be a finite number >= 0."
    if stage.mix and not any(w > 0 for w in weights):
        return False, "mix: at least one weight must be positive."
    for index, entry in enumerate(stage.mix):
        if not isinstance(entry.manifest, str) or not entry.manifest:
            return False, f"mix[{index}].manifest: a manifest path is required."

    return True, ""


def validate_pipeline_config(cfg: PipelineConfig) -> Tuple[bool, str]:
    """
    Validates the whole pipeline: limits, unique names, per-stage checks, and
    "@stage" references pointing only at earlier stages.
    """
    if not cfg.stages:
        return False, "stage: at least one stage is required."
    for key in ("workers", "batch_size", "max_retries"):
        value = getattr(cfg, key)
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            return False, f"pipeline.{key}: must be an integer >= 1."
    if cfg.retry_delay < 0:
        return False, "pipeline.retry_delay: must be >= 0."

    earlier = set()
    for index, stage in enumerate(cfg.stages):
        ok, message = validate_stage_config(stage)
        if not ok:
            return False, f"stage[{index}].{message}"
        if stage.name in earlier:
            return False, f"stage[{index}].name: duplicate stage name '{stage.name}'."
        refs = [("source", stage.source)] + [(f"mix[{i}].manifest", m.manifest) for i, m in enumerate(stage.mix)]
        for where, ref in refs:
            if ref.startswith("@") and ref[1:] not in earlier:
                return False, f"stage[{index}].{where}: '{ref}' does not name an earlier stage."
        earlier.add(stage.name)

    return True, ""


# ==============================================================================
# PIPELINE EXECUTION
# ==============================================================================

@dataclass
class PipelineResult:
    manifests: Dict[str, SampleManifest]
    executed: List[str]
    skipped: List[str]

    def to_dict(self) -> dict:
        return {
            "executed": list(self.executed),
            "skipped": list(self.skipped),
            "stages": {name: len(m) for name, m in self.manifests.items()},
        }


class RunLog:
    """Append-only JSONL event log next to the pipeline state."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def event(self, event: str, stage: str, **details) -> None:
        entry = {
            "time": datetime.now(timezone.utc).isoformat(),
            "event": event,
            "stage": stage,
            **details,
        }
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _load_state(path: Path) -> dict:
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text())
    except ValueError:
        LOGGER.warning("Ignoring unreadable pipeline state %s", path)
        return {}


def _rerun_reasons(previous: Optional[dict], config_hash: str, input_hashes: dict, output_path: Path) -> List[str]:
    if previous is None:
        return ["no previous run"]
    reasons = []
    if previous.get("config_hash") != config_hash:
        reasons.append("config changed")
    if previous.get("input_hashes") != input_hashes:
        reasons.append("inputs changed")
    if not output_path.exists():
        reasons.append("output missing")
    elif previous.get("output_hash") != file_hash(output_path):
        reasons.append("output changed")
    return reasons


def _execute_stage(stage: StageConfig, cfg: PipelineConfig, stage_dir: Path) -> SampleManifest:
    runner = CommandRunner(stage.name, cfg.max_retries, cfg.retry_delay, cfg.timeout)
    current = read_manifest(cfg.resolve(stage.source))

    if stage.labeler:
        current = invoke_labeler(current, stage.labeler, stage_dir, runner, cfg.workers, cfg.batch_size, stage.name)
        write_manifest(current, stage_dir / "labeled.jsonl")
    if stage.scorer:
        current = score_samples(current, stage.scorer, stage_dir, runner, cfg.workers, cfg.batch_size)
        write_manifest(current, stage_dir / "scored.jsonl")
    if stage.selects:
        current = select_top_k(current, stage.k_indoor, stage.k_outdoor)
        write_manifest(current, stage_dir / "selected.jsonl")

    if stage.mix:
        inputs = [(current, stage.source_weight)]
        inputs += [(read_manifest(cfg.resolve(m.manifest)), m.weight) for m in stage.mix]
        tags = [Path(ref.lstrip("@")).stem for ref in [stage.source] + [m.manifest for m in stage.mix]]
        if len(set(tags)) != len(tags):
            tags = None
        seed = stage.seed if stage.seed is not None else cfg.seed
        current = mix_datasets(inputs, seed, tags)
    else:
        current = current.sorted_by_id()
    return current


def run_pipeline(cfg: PipelineConfig, force: bool = False) -> PipelineResult:
    """
    Execute stages in order, skipping those whose config, inputs and output
    are unchanged since the recorded run. Once a stage re-executes, every
    later stage re-executes too.

    Raises:
        ConfigError: the configuration fails validation
        StageFailure: a stage failed; earlier stages keep their outputs
    """
    ok, message = validate_pipeline_config(cfg)
    if not ok:
        field_name, _, detail = message.partition(": ")
        raise ConfigError(field_name, detail)

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    state_path = out / STATE_FILE
    state = _load_state(state_path)
    log = RunLog(out / RUN_LOG_FILE)

    manifests: Dict[str, SampleManifest] = {}
    executed: List[str] = []
    skipped: List[str] = []
    upstream_rerun = False

    for stage in cfg.stages:
        stage_dir = out / stage.name
        output_path = stage_dir / OUTPUT_MANIFEST
        input_paths = [cfg.resolve(stage.source)] + [cfg.resolve(m.manifest) for m in stage.mix]
        for path in input_paths:
            if not path.exists():
                raise StageFailure(stage.name, f"Input manifest not found: {path}")
        input_hashes = {str(p): file_hash(p) for p in input_paths}
        config_hash = stage.config_hash(cfg.seed)

        reasons = _rerun_reasons(state.get(stage.name), config_hash, input_hashes, output_path)
        if force:
            reasons.insert(0, "forced")
        if upstream_rerun:
            reasons.append("upstream re-executed")

        if not reasons:
            LOGGER.info("[%s] skipped (up to date)", stage.name)
            log.event("skipped", stage.name)
            manifests[stage.name] = read_manifest(output_path)
            skipped.append(stage.name)
            continue

        LOGGER.info("[%s] executing: %s", stage.name, ", ".join(reasons))
        log.event("started", stage.name, reasons=reasons)
        try:
            manifest = _execute_stage(stage, cfg, stage_dir)
        except StageFailure as e:
            log.event("failed", stage.name, error=str(e))
            raise
        except PanoDepthError as e:
            log.event("failed", stage.name, error=str(e))
            raise StageFailure(stage.name, str(e)) from e

        manifest = manifest.with_provenance(stage=stage.name, config_hash=config_hash, input_hashes=input_hashes)
        output_hash = write_manifest(manifest, output_path)
        state[stage.name] = {
            "config_hash": config_hash,
            "input_hashes": input_hashes,
            "output_hash": output_hash,
        }
        state_path.write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")
        log.event("completed", stage.name, n_records=len(manifest), output_hash=output_hash)

        manifests[stage.name] = manifest
        executed.append(stage.name)
        upstream_rerun = True

    return PipelineResult(manifests=manifests, executed=executed, skipped=skipped)

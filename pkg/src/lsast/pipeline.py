"""End-to-end scan orchestration across the eight retrieval modes.

Each mode fixes which ingredients join the target code in the prompt:

    raw                  code only
    raw_lsast            code + scanner findings
    functionality        code + functionality-similar reports
    functionality_lsast  code + functionality-similar reports + scanner findings
    abstraction          code + abstraction-similar reports
    abstraction_lsast    code + abstraction-similar reports + scanner findings
    combined             code + both report sets
    combined_lsast       code + both report sets + scanner findings

Dependencies are validated before any model call: a retrieval mode without
its index fails fast instead of silently degrading to raw, because silent
mode drift would invalidate downstream evaluations.
"""

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

from .annotate import DEFAULT_LINE_BUDGET, annotate_lines
from .errors import (
    ConfigurationError,
    DerivationError,
    GatewayError,
    IndexIntegrityError,
    LsastError,
    RecordIntegrityError,
    ScanError,
    SearchError,
)
from .gateway import PredictedFinding, parse_scan_response
from .index import DEFAULT_K, DerivationCache
from .prompts import DEFAULT_PROMPT_CHAR_BUDGET, TEMPLATE_VERSION, build_scan_prompt
from .sast import Finding, filter_findings_for_file, format_findings

logger = logging.getLogger(__name__)

RECORD_VERSION = 1

# languages accepted when expanding directory targets
TARGET_EXTENSIONS = (".js", ".ts", ".php", ".java", ".py")


class RetrievalMode(Enum):
    RAW = "raw"
    RAW_LSAST = "raw_lsast"
    FUNCTIONALITY = "functionality"
    FUNCTIONALITY_LSAST = "functionality_lsast"
    ABSTRACTION = "abstraction"
    ABSTRACTION_LSAST = "abstraction_lsast"
    COMBINED = "combined"
    COMBINED_LSAST = "combined_lsast"

    @property
    def uses_scanner(self) -> bool:
        return self.value.endswith("_lsast")

    @property
    def uses_functionality(self) -> bool:
        return self in (
            RetrievalMode.FUNCTIONALITY,
            RetrievalMode.FUNCTIONALITY_LSAST,
            RetrievalMode.COMBINED,
            RetrievalMode.COMBINED_LSAST,
        )

    @property
    def uses_abstraction(self) -> bool:
        return self in (
            RetrievalMode.ABSTRACTION,
            RetrievalMode.ABSTRACTION_LSAST,
            RetrievalMode.COMBINED,
            RetrievalMode.COMBINED_LSAST,
        )

    @classmethod
    def parse(cls, name: str) -> "RetrievalMode":
        try:
            return cls(name.strip().lower().replace("-", "_"))
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ConfigurationError(f"unknown mode {name!r}; expected one of: {valid}") from None


@dataclass
class ScanContext:
    """Everything a scan needs besides the target and mode.

    scanner is a callable (target path) -> list[Finding]; the pipeline
    filters its output down to the target file either way, so a canned
    full-repository report works unchanged. attach_scanner_findings records
    scanner findings on results of non-scanner modes (for later evaluation)
    without ever feeding them to the prompt.
    """

    gateway: object = None
    corpus: object = None
    functionality_index: object = None
    abstraction_index: object = None
    embedder: object = None
    scanner: object = None
    attach_scanner_findings: bool = False
    line_budget: int = DEFAULT_LINE_BUDGET
    char_budget: int = DEFAULT_PROMPT_CHAR_BUDGET
    cache: DerivationCache = field(default_factory=DerivationCache)


@dataclass
class ScanResult:
    """Self-contained outcome of one scan, sufficient for re-evaluation."""

    target_path: str
    mode: RetrievalMode
    k: int
    scanner_findings: list[Finding] = field(default_factory=list)
    retrieved_report_ids: dict = field(default_factory=lambda: {"functionality": [], "abstraction": []})
    included_report_ids: list[int] = field(default_factory=list)
    dropped_report_ids: list[int] = field(default_factory=list)
    predicted: list[PredictedFinding] = field(default_factory=list)
    none_found: bool = False
    parse_degraded: bool = False
    raw_response: str = ""
    prompt_digest: str = ""
    template_version: str = TEMPLATE_VERSION
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "target_path": self.target_path,
            "mode": self.mode.value,
            "k": self.k,
            "scanner_findings": [f.to_dict() for f in self.scanner_findings],
            "retrieved_report_ids": {
                "functionality": list(self.retrieved_report_ids.get("functionality", [])),
                "abstraction": list(self.retrieved_report_ids.get("abstraction", [])),
            },
            "included_report_ids": list(self.included_report_ids),
            "dropped_report_ids": list(self.dropped_report_ids),
            "predicted": [f.to_dict() for f in self.predicted],
            "none_found": self.none_found,
            "parse_degraded": self.parse_degraded,
            "raw_response": self.raw_response,
            "prompt_digest": self.prompt_digest,
            "template_version": self.template_version,
            "timings": dict(self.timings),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScanResult":
        return cls(
            target_path=data["target_path"],
            mode=RetrievalMode(data["mode"]),
            k=data["k"],
            scanner_findings=[Finding.from_dict(f) for f in data["scanner_findings"]],
            retrieved_report_ids=data["retrieved_report_ids"],
            included_report_ids=data["included_report_ids"],
            dropped_report_ids=data["dropped_report_ids"],
            predicted=[PredictedFinding.from_dict(f) for f in data["predicted"]],
            none_found=data["none_found"],
            parse_degraded=data["parse_degraded"],
            raw_response=data["raw_response"],
            prompt_digest=data["prompt_digest"],
            template_version=data["template_version"],
            timings=data.get("timings", {}),
        )


@dataclass
class ScanFailure:
    """Inline record of one failed target within a batch."""

    target_path: str
    error: str
    error_type: str


def _validate_dependencies(mode: RetrievalMode, context: ScanContext):
    if context.gateway is None:
        raise ConfigurationError("no chat gateway configured")
    if mode.uses_scanner and context.scanner is None:
        raise ConfigurationError(f"mode {mode.value} needs scanner output, none configured")
    needs_retrieval = mode.uses_functionality or mode.uses_abstraction
    if needs_retrieval:
        if context.corpus is None:
            raise ConfigurationError(f"mode {mode.value} needs the report corpus")
        if context.embedder is None:
            raise ConfigurationError(f"mode {mode.value} needs an embedder")
        corpus_digest = context.corpus.digest()
        for label, index in (
            ("functionality", context.functionality_index),
            ("abstraction", context.abstraction_index),
        ):
            wanted = (label == "functionality" and mode.uses_functionality) or (
                label == "abstraction" and mode.uses_abstraction
            )
            if not wanted:
                continue
            if index is None:
                raise ConfigurationError(
                    f"mode {mode.value} needs the {label} index, none configured"
                )
            if index.corpus_digest != corpus_digest:
                raise ConfigurationError(
                    f"{label} index was built against a different corpus state; rebuild it"
                )


def _correlated_with_sims(hits, corpus) -> list[tuple[object, float]]:
    """Resolve hits to (report, best similarity), deduplicated by report id."""
    out = []
    seen: set[int] = set()
    for hit in hits:
        try:
            snippet = corpus.resolve_sequence(hit.entry.sequence)
        except KeyError:
            raise IndexIntegrityError(
                f"sequence {hit.entry.sequence} not in the corpus snippet catalog; "
                "index and corpus are out of sync"
            ) from None
        if snippet.report_id in seen:
            continue
        seen.add(snippet.report_id)
        out.append((corpus.get_report(snippet.report_id), hit.similarity))
    return out


def _merge_retrievals(func_pairs, abs_pairs) -> list:
    """Merge per-source (report, similarity) lists into one prompt order.

    Sorted by descending similarity; at equal similarity functionality hits
    precede abstraction hits; report ids deduplicate first-wins.
    """
    candidates = []
    for rank, (report, sim) in enumerate(func_pairs):
        candidates.append((-sim, 0, rank, report))
    for rank, (report, sim) in enumerate(abs_pairs):
        candidates.append((-sim, 1, rank, report))
    candidates.sort(key=lambda c: (c[0], c[1], c[2]))
    merged = []
    seen: set[int] = set()
    for _, _, _, report in candidates:
        if report.id in seen:
            continue
        seen.add(report.id)
        merged.append(report)
    return merged


def _scanner_findings_for(context: ScanContext, target: Path) -> list[Finding]:
    findings = context.scanner(target)
    return filter_findings_for_file(findings, target)


def run_scan(target, mode: RetrievalMode, k: int = DEFAULT_K,
             context: ScanContext | None = None) -> ScanResult:
    """Scan one target file under `mode` with top-`k` retrieval per index.

    Raises:
        ConfigurationError: a dependency the mode needs is missing or stale
            (raised before any model call).
        ScanError: the target is unreadable/empty, a retrieval step failed,
            or the scan call failed; scan-call failures carry a partial
            result with the retrievals preserved.
    """
    if context is None:
        raise ConfigurationError("run_scan needs a ScanContext")
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    mode = RetrievalMode(mode)
    _validate_dependencies(mode, context)

    target = Path(target)
    t_start = time.monotonic()
    try:
        source = target.read_text(encoding="utf-8", errors="replace")
    except OSError as exc:
        raise ScanError(f"cannot read target {target}: {exc}") from None
    annotated = annotate_lines(source, context.line_budget)
    if annotated.line_count == 0:
        raise ScanError(f"target {target} is empty")

    timings = {}
    scanner_findings: list[Finding] = []
    formatted = None
    if mode.uses_scanner:
        t0 = time.monotonic()
        scanner_findings = _scanner_findings_for(context, target)
        formatted = format_findings(scanner_findings)
        timings["scanner_s"] = round(time.monotonic() - t0, 6)
    elif context.scanner is not None and context.attach_scanner_findings:
        # recorded for later evaluation; never enters the prompt
        scanner_findings = _scanner_findings_for(context, target)

    retrieved_ids = {"functionality": [], "abstraction": []}
    func_pairs: list = []
    abs_pairs: list = []
    if mode.uses_functionality or mode.uses_abstraction:
        t0 = time.monotonic()
        try:
            if mode.uses_functionality:
                hits = context.functionality_index.search(
                    source, k, context.gateway, context.embedder, context.cache
                )
                func_pairs = _correlated_with_sims(hits, context.corpus)
                retrieved_ids["functionality"] = [r.id for r, _ in func_pairs]
            if mode.uses_abstraction:
                hits = context.abstraction_index.search(
                    source, k, context.gateway, context.embedder, context.cache
                )
                abs_pairs = _correlated_with_sims(hits, context.corpus)
                retrieved_ids["abstraction"] = [r.id for r, _ in abs_pairs]
        except (GatewayError, DerivationError, SearchError) as exc:
            raise ScanError(
                f"retrieval failed for {target} in mode {mode.value}: {exc}"
            ) from exc
        timings["retrieval_s"] = round(time.monotonic() - t0, 6)
    merged = _merge_retrievals(func_pairs, abs_pairs)

    built = build_scan_prompt(
        annotated,
        sast=formatted if mode.uses_scanner else None,
        reports=merged or None,
        char_budget=context.char_budget,
    )
    prompt_digest = hashlib.sha256(built.text.encode("utf-8")).hexdigest()

    partial = ScanResult(
        target_path=str(target),
        mode=mode,
        k=k,
        scanner_findings=scanner_findings,
        retrieved_report_ids=retrieved_ids,
        included_report_ids=built.included_report_ids,
        dropped_report_ids=built.dropped_report_ids,
        prompt_digest=prompt_digest,
        timings=timings,
    )

    t0 = time.monotonic()
    try:
        raw_response = context.gateway.complete(built.text)
    except GatewayError as exc:
        raise ScanError(f"gateway failed for {target}: {exc}", partial_result=partial) from exc
    timings["model_s"] = round(time.monotonic() - t0, 6)

    parsed = parse_scan_response(raw_response)
    timings["total_s"] = round(time.monotonic() - t_start, 6)
    partial.predicted = parsed.findings
    partial.none_found = parsed.none_found
    partial.parse_degraded = parsed.parse_degraded
    partial.raw_response = parsed.raw_text
    partial.timings = timings
    return partial


def expand_targets(targets, extensions=TARGET_EXTENSIONS) -> list[Path]:
    """Expand files and directories into the concrete scan list.

    Explicit files are kept as given; directories contribute their tree's
    files whose suffix is in `extensions`, sorted for determinism.

    Raises:
        ConfigurationError: a target does not exist.
    """
    expanded: list[Path] = []
    for target in targets:
        path = Path(target)
        if path.is_dir():
            expanded.extend(sorted(
                (p for p in path.rglob("*") if p.is_file() and p.suffix.lower() in extensions),
                key=lambda p: p.as_posix(),
            ))
        elif path.is_file():
            expanded.append(path)
        else:
            raise ConfigurationError(f"scan target does not exist: {path}")
    return expanded


def run_scan_batch(targets, mode: RetrievalMode, k: int = DEFAULT_K,
                   context: ScanContext | None = None,
                   parallelism: int = 1) -> list:
    """Scan many targets; results in input order, failures recorded inline.

    Returns a list whose elements are ScanResult or ScanFailure. Raises
    ScanError only when every target failed (and there was at least one).
    """
    mode = RetrievalMode(mode)
    expanded = expand_targets(targets)
    if not expanded:
        return []
    results: list = [None] * len(expanded)

    def scan_one(index_target):
        index, target = index_target
        try:
            return index, run_scan(target, mode, k, context)
        except LsastError as exc:
            logger.warning("scan failed for %s: %s", target, exc)
            return index, ScanFailure(
                target_path=str(target), error=str(exc), error_type=type(exc).__name__
            )

    workers = max(1, parallelism)
    if workers == 1:
        outcomes = map(scan_one, enumerate(expanded))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(scan_one, enumerate(expanded)))
    for index, outcome in outcomes:
        results[index] = outcome

    if all(isinstance(r, ScanFailure) for r in results):
        first = results[0]
        raise ScanError(
            f"all {len(results)} targets failed; first: {first.target_path}: {first.error}"
        )
    return results


# -- persistence ------------------------------------------------------------

def _canonical_essence(result_payload: dict) -> str:
    """Canonical serialization of a result payload minus volatile fields."""
    stable = {key: value for key, value in result_payload.items() if key != "timings"}
    return json.dumps(stable, sort_keys=True, ensure_ascii=False)


def record_essence(record: dict) -> str:
    """Canonical bytes of a persisted record minus timestamps and timings.

    Two runs of the same deterministic scan agree on this string even though
    their files differ in persisted_at and timing values.
    """
    stable = {key: value for key, value in record.items() if key != "persisted_at"}
    stable["result"] = {
        key: value for key, value in record["result"].items() if key != "timings"
    }
    return json.dumps(stable, sort_keys=True, ensure_ascii=False)


def persist_scan(result: ScanResult, out_dir) -> Path:
    """Write one scan result as a self-contained, digest-protected record.

    The record id is a prefix of the content digest, which covers everything
    except timings, so identical scans persist under the same id with
    distinct timestamps and filenames.

    Raises:
        ScanError: out_dir cannot be created or written.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ScanError(f"cannot create scan record directory {out_dir}: {exc}") from None
    payload = result.to_dict()
    content_digest = hashlib.sha256(_canonical_essence(payload).encode("utf-8")).hexdigest()
    record = {
        "record_version": RECORD_VERSION,
        "record_id": content_digest[:12],
        "content_digest": content_digest,
        "persisted_at": datetime.now(timezone.utc).isoformat(),
        "result": payload,
    }
    path = out_dir / f"scan-{record['record_id']}-{time.time_ns()}.json"
    try:
        path.write_text(
            json.dumps(record, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
            encoding="utf-8",
        )
    except OSError as exc:
        raise ScanError(f"cannot write scan record {path}: {exc}") from None
    return path


@dataclass
class PersistedScan:
    record_id: str
    content_digest: str
    persisted_at: str
    result: ScanResult
    path: Path


def load_scan(path) -> PersistedScan:
    """Load and verify one persisted scan record.

    Raises:
        RecordIntegrityError: unreadable, truncated, or digest-mismatched.
    """
    path = Path(path)
    try:
        record = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise RecordIntegrityError(f"cannot load scan record {path}: {exc}") from None
    try:
        payload = record["result"]
        expected = record["content_digest"]
        record_id = record["record_id"]
        persisted_at = record["persisted_at"]
    except (KeyError, TypeError):
        raise RecordIntegrityError(f"scan record {path} is missing required fields") from None
    actual = hashlib.sha256(_canonical_essence(payload).encode("utf-8")).hexdigest()
    if actual != expected:
        raise RecordIntegrityError(
            f"scan record {path} content digest mismatch (corrupt or tampered)"
        )
    try:
        result = ScanResult.from_dict(payload)
    except (KeyError, ValueError, TypeError) as exc:
        raise RecordIntegrityError(f"scan record {path} payload malformed: {exc}") from None
    return PersistedScan(
        record_id=record_id,
        content_digest=expected,
        persisted_at=persisted_at,
        result=result,
        path=path,
    )


def load_scan_directory(directory) -> list[PersistedScan]:
    """Load every scan-*.json record under `directory`, sorted by filename."""
    directory = Path(directory)
    if not directory.is_dir():
        raise RecordIntegrityError(f"scan record directory does not exist: {directory}")
    return [load_scan(p) for p in sorted(directory.glob("scan-*.json"))]

"""Security governance: release gate, tamper-evident registry, monitors.

The gate compares attacked to clean detection performance, where
performance is 1 - laMR on the Reasonable subset, and passes only if
every required attack retains at least `min_perf_ratio` of clean
performance at budgets within the policy caps.

The registry is an append-only JSON-lines ledger.  Every record's
payload (all fields except prev_hash / record_hash / mac, serialized as
canonical JSON) is chained: record_hash = SHA-256(prev_hash_bytes ||
payload_bytes) with a 32-zero-byte genesis, and authenticated with
mac = HMAC-SHA-256(key, record_hash_bytes).  The signing key comes from
the SECMLOPS_LEDGER_KEY environment variable as hex.  Records carry no
wall-clock time, so reruns of a pipeline produce byte-identical ledgers;
run timestamps live in metrics files and incident records instead.

Rollback selects the most recent record that passed the gate with
complete approvals (roles R3 and R8); safe mode selects, among passing
records, the one trained at the largest adversarial-training epsilon
(most recent on ties).

The poison screen compares the distribution of label-center-to-nearest-
edge-cluster distances between an incoming batch and golden (verified
clean) data with a two-sample KS statistic: flipped labels sit exactly
on edge-cluster centroids, collapsing that distance to zero.  The drift
monitor compares prediction-confidence histograms (20 fixed bins on
[0, 1]) between a baseline and a live window, alerting on the max CDF
gap, and auto-files an incident when given an incident log.
"""
from __future__ import annotations

import fcntl
import hashlib
import hmac
import json
import os
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import stats

from .canon import canonical_json_bytes
from .errors import (BudgetExceedsPolicy, ConcurrentWriter, GoldenTooSmall,
                     IncompletePayload, InvalidConfig, LedgerInvalid,
                     MissingRequiredAttack, NoSecureVersion, WindowTooSmall)
from .metrics import MetricReport
from .synthdata import Dataset, EdgeParams, PedestrianGT, Scene, \
    extract_adversarial_centers

LEDGER_KEY_ENV = "SECMLOPS_LEDGER_KEY"
GENESIS = b"\x00" * 32
REQUIRED_APPROVALS = ("R3", "R8")


# ---------------------------------------------------------------------------
# gate


@dataclass(frozen=True)
class GatePolicy:
    min_perf_ratio: float = 0.8
    max_fgsm_epsilon: float = 0.03
    max_deepfool_overshoot: float = 0.03
    required_attacks: tuple[str, ...] = ("fgsm", "deepfool")
    aggregate: bool = False  # False: every attack must pass; True: mean ratio

    def validate(self) -> None:
        if not (0.0 <= self.min_perf_ratio <= 1.0):
            raise InvalidConfig("min_perf_ratio must be within [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["required_attacks"] = list(self.required_attacks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GatePolicy":
        d = dict(d)
        if "required_attacks" in d:
            d["required_attacks"] = tuple(d["required_attacks"])
        return cls(**d)


@dataclass
class GateVerdict:
    passed: bool
    ratios: dict[str, float]
    reasons: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"verdict": "pass" if self.passed else "fail",
                "ratios": self.ratios, "reasons": self.reasons}


def perf_score(report: MetricReport, subset: str = "Reasonable") -> float:
    """Gate performance: 1 - laMR on the given subset."""
    v = report.lamr.get(subset)
    if v is None:
        raise InvalidConfig(f"report has no laMR for subset {subset!r}")
    return 1.0 - v


def evaluate_gate(clean: MetricReport, attacked: list[tuple[object, MetricReport]],
                  policy: GatePolicy = GatePolicy()) -> GateVerdict:
    """Check attacked performance retention against the policy.

    `attacked` pairs each attack spec (with .kind and its budget fields)
    with the report measured under that attack.  Budgets above the policy
    caps and missing required attacks are errors, not failures: the gate
    only rules on evidence gathered under policy.
    """
    policy.validate()
    kinds = [getattr(spec, "kind", "?") for spec, _ in attacked]
    for required in policy.required_attacks:
        if required not in kinds:
            raise MissingRequiredAttack(f"gate requires attack {required!r}")
    for spec, _ in attacked:
        kind = getattr(spec, "kind", "?")
        if kind == "fgsm" and spec.epsilon > policy.max_fgsm_epsilon:
            raise BudgetExceedsPolicy(
                f"fgsm epsilon {spec.epsilon} above cap {policy.max_fgsm_epsilon}")
        if kind == "deepfool" and spec.overshoot > policy.max_deepfool_overshoot:
            raise BudgetExceedsPolicy(
                f"deepfool overshoot {spec.overshoot} above cap "
                f"{policy.max_deepfool_overshoot}")
    clean_perf = perf_score(clean)
    ratios: dict[str, float] = {}
    reasons: list[str] = []
    if clean_perf <= 0.0:
        return GateVerdict(False, {}, ["clean performance is zero; nothing to retain"])
    for spec, report in attacked:
        kind = getattr(spec, "kind", "?")
        ratios[kind] = perf_score(report) / clean_perf
    if policy.aggregate:
        mean_ratio = float(np.mean(list(ratios.values())))
        ok = mean_ratio >= policy.min_perf_ratio
        if not ok:
            reasons.append(f"mean retention {mean_ratio:.3f} below "
                           f"{policy.min_perf_ratio:.3f}")
        return GateVerdict(ok, ratios, reasons)
    for kind, ratio in ratios.items():
        if ratio < policy.min_perf_ratio:
            reasons.append(f"{kind} retention {ratio:.3f} below "
                           f"{policy.min_perf_ratio:.3f}")
    return GateVerdict(not reasons, ratios, reasons)


# ---------------------------------------------------------------------------
# ledger


_PAYLOAD_REQUIRED = ("model_id", "dataset_digest", "config_digest",
                     "provenance", "metrics_digest", "gate", "approvals")
_CHAIN_FIELDS = ("prev_hash", "record_hash", "mac")


def load_ledger_key(env: dict | None = None) -> bytes:
    """Read the HMAC key (hex) from SECMLOPS_LEDGER_KEY."""
    source = os.environ if env is None else env
    raw = source.get(LEDGER_KEY_ENV)
    if not raw:
        raise InvalidConfig(f"{LEDGER_KEY_ENV} is not set")
    try:
        key = bytes.fromhex(raw)
    except ValueError as exc:
        raise InvalidConfig(f"{LEDGER_KEY_ENV} is not valid hex") from exc
    if not key:
        raise InvalidConfig(f"{LEDGER_KEY_ENV} is empty")
    return key


@dataclass
class VerifyResult:
    valid: bool
    broken_at: int | None = None
    reason: str = ""


def payload_bytes(payload: dict) -> bytes:
    return canonical_json_bytes(payload)


def record_hash(prev_hash: bytes, payload: dict) -> bytes:
    return hashlib.sha256(prev_hash + payload_bytes(payload)).digest()


def record_mac(key: bytes, rec_hash: bytes) -> bytes:
    return hmac.new(key, rec_hash, hashlib.sha256).digest()


class Ledger:
    """Append-only, hash-chained, MAC-authenticated model registry.

    One JSON object per line.  Appends take an exclusive lock on a
    sibling .lock file, and each record is written with a single
    write+fsync so a record is either fully present or absent.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)

    # -- io ---------------------------------------------------------------

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        out = []
        for line in self.path.read_bytes().splitlines():
            if line.strip():
                out.append(json.loads(line))
        return out

    def append(self, payload: dict, key: bytes) -> dict:
        """Chain, MAC and persist one record; returns it with chain fields."""
        missing = [f for f in _PAYLOAD_REQUIRED if f not in payload]
        if missing:
            raise IncompletePayload(f"payload missing fields: {missing}")
        for f in _CHAIN_FIELDS + ("record_index",):
            if f in payload:
                raise IncompletePayload(f"payload must not pre-set {f!r}")
        lock_path = self.path.with_suffix(self.path.suffix + ".lock")
        lock_fd = os.open(lock_path, os.O_CREAT | os.O_RDWR)
        try:
            try:
                fcntl.flock(lock_fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError as exc:
                raise ConcurrentWriter(f"ledger {self.path} is locked") from exc
            existing = self.records()
            prev = (bytes.fromhex(existing[-1]["record_hash"])
                    if existing else GENESIS)
            full_payload = dict(payload)
            full_payload["record_index"] = len(existing)
            rh = record_hash(prev, full_payload)
            record = dict(full_payload)
            record["prev_hash"] = prev.hex()
            record["record_hash"] = rh.hex()
            record["mac"] = record_mac(key, rh).hex()
            line = canonical_json_bytes(record) + b"\n"
            with open(self.path, "ab") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            return record
        finally:
            fcntl.flock(lock_fd, fcntl.LOCK_UN)
            os.close(lock_fd)

    # -- verification -------------------------------------------------------

    def verify(self, key: bytes) -> VerifyResult:
        """Walk the chain; report the first index whose hash, link or MAC
        breaks.  A wrong key breaks at index 0."""
        prev = GENESIS
        for i, rec in enumerate(self.records()):
            try:
                payload = {k: v for k, v in rec.items() if k not in _CHAIN_FIELDS}
                if rec.get("prev_hash") != prev.hex():
                    return VerifyResult(False, i, "chain link mismatch")
                if payload.get("record_index") != i:
                    return VerifyResult(False, i, "record index mismatch")
                rh = record_hash(prev, payload)
                if rec.get("record_hash") != rh.hex():
                    return VerifyResult(False, i, "record hash mismatch")
                expect_mac = record_mac(key, rh)
                if not hmac.compare_digest(bytes.fromhex(rec.get("mac", "")),
                                           expect_mac):
                    return VerifyResult(False, i, "mac mismatch")
                prev = rh
            except (KeyError, ValueError, TypeError):
                return VerifyResult(False, i, "malformed record")
        return VerifyResult(True)

    # -- queries ------------------------------------------------------------

    @staticmethod
    def _passed(rec: dict) -> bool:
        return rec.get("gate", {}).get("verdict") == "pass"

    @staticmethod
    def _approved(rec: dict) -> bool:
        approvals = set(rec.get("approvals", []))
        return all(r in approvals for r in REQUIRED_APPROVALS)

    @staticmethod
    def _at_epsilon(rec: dict) -> float:
        at = (rec.get("provenance") or {}).get("stack", {}).get("adversarial_training")
        return float(at["epsilon"]) if at else 0.0

    def rollback_target(self) -> dict:
        """Most recent record that passed the gate with complete approvals."""
        for rec in reversed(self.records()):
            if self._passed(rec) and self._approved(rec):
                return rec
        raise NoSecureVersion("no passing, fully approved record to roll back to")

    def safe_mode_target(self) -> dict:
        """Passing record with the largest adversarial-training epsilon
        (most recent on ties)."""
        best: dict | None = None
        for rec in self.records():
            if not self._passed(rec):
                continue
            if best is None or self._at_epsilon(rec) >= self._at_epsilon(best):
                best = rec
        if best is None:
            raise NoSecureVersion("no passing record for safe mode")
        return best

    def require_valid(self, key: bytes) -> None:
        res = self.verify(key)
        if not res.valid:
            raise LedgerInvalid(f"ledger broken at record {res.broken_at}: "
                                f"{res.reason}")


# ---------------------------------------------------------------------------
# poison screen


@dataclass
class GoldenStats:
    """Reference distances from golden labels to their nearest edge
    cluster; needs at least 30 labels to be usable."""

    distances: list[float]
    edge_params: EdgeParams = EdgeParams()

    def validate(self) -> None:
        if len(self.distances) < 30:
            raise GoldenTooSmall(
                f"golden sample has {len(self.distances)} labels; need >= 30")


def label_edge_distances(scenes: list[Scene], gts: list[list[PedestrianGT]],
                         edge_params: EdgeParams = EdgeParams()) -> list[float]:
    """Distance from each label center to the nearest edge-cluster
    centroid of its scene (no exclusion radius: the label set itself is
    what is under suspicion).  Labels in scenes without any edge cluster
    are skipped."""
    raw = EdgeParams(threshold_frac=edge_params.threshold_frac, exclusion_radius=0.0)
    out: list[float] = []
    for scene, scene_gts in zip(scenes, gts):
        if not scene_gts:
            continue
        centers = extract_adversarial_centers(scene, [], raw).centers
        if not centers:
            continue
        arr = np.asarray(centers)
        for g in scene_gts:
            if g.ignore:
                continue
            d = np.hypot(arr[:, 0] - g.center_row, arr[:, 1] - g.center_col)
            out.append(float(d.min()))
    return out


def build_golden_stats(dataset: Dataset,
                       edge_params: EdgeParams = EdgeParams()) -> GoldenStats:
    ids = dataset.split.golden
    stats_ = GoldenStats(
        label_edge_distances([dataset.scenes[i] for i in ids],
                             [dataset.gts[i] for i in ids], edge_params),
        edge_params)
    stats_.validate()
    return stats_


@dataclass
class ScreenResult:
    accepted: bool
    ks_statistic: float
    threshold: float
    n_incoming: int


def screen_poison(scenes: list[Scene], gts: list[list[PedestrianGT]],
                  golden: GoldenStats, threshold: float = 0.25) -> ScreenResult:
    """Two-sample KS test of incoming label-to-edge distances against the
    golden reference; quarantine when the statistic exceeds the threshold."""
    golden.validate()
    incoming = label_edge_distances(scenes, gts, golden.edge_params)
    if not incoming:
        raise WindowTooSmall("incoming batch has no screenable labels")
    ks = float(stats.ks_2samp(incoming, golden.distances).statistic)
    return ScreenResult(ks <= threshold, ks, threshold, len(incoming))


# ---------------------------------------------------------------------------
# drift monitor


DRIFT_BINS = 20


@dataclass
class DriftBaseline:
    """Reference confidence histogram over 20 fixed bins on [0, 1]."""

    bin_counts: list[int]
    n: int
    threshold: float = 0.15
    min_window: int = 200

    @classmethod
    def from_confidences(cls, confidences: list[float], threshold: float = 0.15,
                         min_window: int = 200) -> "DriftBaseline":
        arr = np.asarray(confidences, dtype=float)
        if arr.size == 0:
            raise InvalidConfig("baseline needs at least one confidence")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise InvalidConfig("confidences must lie in [0, 1]")
        counts, _ = np.histogram(arr, bins=DRIFT_BINS, range=(0.0, 1.0))
        return cls([int(c) for c in counts], int(arr.size), threshold, min_window)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DriftBaseline":
        return cls(**d)


@dataclass
class DriftResult:
    alert: bool
    ks_statistic: float
    threshold: float
    n_window: int


def drift_check(baseline: DriftBaseline, window: list[float],
                incident_log: "IncidentLog | None" = None) -> DriftResult:
    """Binned two-sample KS between baseline and window confidences.

    The statistic is the maximum CDF gap at the 20 bin edges.  Alerts
    auto-file a drift-alert incident when a log is provided.
    """
    arr = np.asarray(window, dtype=float)
    if arr.size < baseline.min_window:
        raise WindowTooSmall(
            f"window has {arr.size} samples; need >= {baseline.min_window}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidConfig("confidences must lie in [0, 1]")
    wc, _ = np.histogram(arr, bins=DRIFT_BINS, range=(0.0, 1.0))
    base_cdf = np.cumsum(baseline.bin_counts) / max(1, baseline.n)
    win_cdf = np.cumsum(wc) / arr.size
    ks = float(np.abs(base_cdf - win_cdf).max())
    result = DriftResult(ks > baseline.threshold, ks, baseline.threshold,
                         int(arr.size))
    if result.alert and incident_log is not None:
        incident_log.append(make_incident("drift-alert",
                                          detail=f"confidence KS {ks:.4f} above "
                                                 f"{baseline.threshold}"))
    return result


# ---------------------------------------------------------------------------
# incidents


TRIGGERS = ("gate-fail", "drift-alert", "poison-quarantine", "manual")
ACTIONS = ("rollback", "safe-mode", "quarantine")
DEFAULT_ACTIONS = {
    "gate-fail": "rollback",
    "drift-alert": "safe-mode",
    "poison-quarantine": "quarantine",
}


@dataclass
class IncidentRecord:
    timestamp: float
    trigger: str
    action: str
    record_index: int | None = None
    detail: str = ""

    def validate(self) -> None:
        if self.trigger not in TRIGGERS:
            raise InvalidConfig(f"unknown trigger {self.trigger!r}")
        if self.action not in ACTIONS:
            raise InvalidConfig(f"unknown action {self.action!r}")
        expected = DEFAULT_ACTIONS.get(self.trigger)
        if expected is not None and self.action != expected:
            raise InvalidConfig(
                f"trigger {self.trigger!r} maps to action {expected!r}, "
                f"not {self.action!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def make_incident(trigger: str, record_index: int | None = None,
                  detail: str = "", action: str | None = None,
                  timestamp: float | None = None) -> IncidentRecord:
    """Build a validated incident; automatic triggers take their default
    action, manual ones must name an action explicitly."""
    if action is None:
        if trigger not in DEFAULT_ACTIONS:
            raise InvalidConfig(f"trigger {trigger!r} needs an explicit action")
        action = DEFAULT_ACTIONS[trigger]
    rec = IncidentRecord(time.time() if timestamp is None else timestamp,
                         trigger, action, record_index, detail)
    rec.validate()
    return rec


class IncidentLog:
    """Append-only JSON-lines incident log."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, record: IncidentRecord) -> None:
        record.validate()
        with open(self.path, "ab") as fh:
            fh.write(canonical_json_bytes(record.to_dict()) + b"\n")

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_bytes().splitlines()
                if line.strip()]

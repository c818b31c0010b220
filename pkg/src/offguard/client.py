"""The offloading device.

Orchestrates setup and inference against one worker (integrity, privacy)
or two workers (confidentiality), stores one commitment per holistic
inference, and verifies asynchronously: pick a random subset of committed
units, fetch an opening proof, recompute the opened layer pieces locally
and compare within tolerance. Verification never sits on the inference
path; it is an explicit queue the caller drains when idle.

In layered mode the device already holds every layer's (unmasked) inputs
and outputs, so it verifies offloaded layers locally with no worker round
trip; commitment-based verification is a holistic-mode feature here.
"""

from __future__ import annotations

import math
import os
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .commitment import (
    MerkleCommit,
    UnitLayout,
    build_commit,
    intermediate_sliceable,
    proof_from_bytes,
    reduce_layer_roots,
    slice_layout,
    verify_proof,
)
from .container import model_to_bytes
from .errors import (
    BadMagicError,
    CommitMismatchError,
    DomainError,
    GranularityError,
    OffguardError,
    ShapeError,
    UnknownTypeError,
)
from .geometry import Region, whole_region
from .masking import (
    MaskSet,
    combine_shares,
    generate_masks,
    mask_input,
    rng_from_seed,
    split_weights,
    unmask_output,
)
from .nn import ModelSpec, forward_layer, forward_region, infer_shapes, receptive_region
from .protocol import (
    MODE_HOLISTIC,
    MODE_LAYER,
    InferRequest,
    InferResponse,
    ROLE_FULL,
    ROLE_SHARE_MINUS,
    ROLE_SHARE_PLUS,
    SetupAck,
    SetupModel,
    VerifyRequest,
    VerifyResponse,
)
from .tensor import Tensor, as_tensor, read_tensor, tensor_to_bytes
from .transport import Session
from .wire import Reader, pack_f32, pack_u8, pack_u16, pack_u32, pack_u64

_F32 = np.float32

RECOMPUTE_RTOL = 1e-4
RECOMPUTE_ATOL = 1e-6

PLACE_LOCAL = "local"
PLACE_OFFLOAD = "offload"

MODE_LAYERED = "layered"


@dataclass(frozen=True)
class OffloadPlan:
    """What to offload and under which protections.

    Masking (privacy_k) and weight shares (confidentiality_k) force
    layered mode because they only commute with linear layers; holistic
    offload is the integrity-only fast path. Confidentiality needs exactly
    two workers, every other configuration exactly one.
    """

    mode: str = MODE_HOLISTIC
    placement: tuple[str, ...] | None = None  # per layer; None = offload parametric layers
    privacy_k: float | None = None
    confidentiality_k: float | None = None
    verify_ratio: float = 1.0

    def __post_init__(self):
        if self.mode not in (MODE_HOLISTIC, MODE_LAYERED):
            raise DomainError(f"unknown mode {self.mode!r}")
        if not (0.0 < self.verify_ratio <= 1.0):
            raise DomainError(f"verify_ratio must be in (0, 1], got {self.verify_ratio}")
        if (self.privacy_k is not None or self.confidentiality_k is not None) and self.mode != MODE_LAYERED:
            raise DomainError("masking requires layered offload")
        if self.privacy_k is not None and self.privacy_k < 0:
            raise DomainError("privacy_k must be >= 0")
        if self.confidentiality_k is not None and self.confidentiality_k < 0:
            raise DomainError("confidentiality_k must be >= 0")

    @property
    def workers_needed(self) -> int:
        return 2 if self.confidentiality_k is not None else 1

    def resolved_placement(self, model: ModelSpec) -> tuple[str, ...]:
        if self.placement is None:
            placement = tuple(
                PLACE_OFFLOAD if layer.has_params else PLACE_LOCAL for layer in model.layers
            )
        else:
            if len(self.placement) != len(model.layers):
                raise DomainError("placement length != layer count")
            placement = tuple(self.placement)
        for i, (p, layer) in enumerate(zip(placement, model.layers)):
            if p not in (PLACE_LOCAL, PLACE_OFFLOAD):
                raise DomainError(f"bad placement {p!r} at layer {i}")
            if p == PLACE_OFFLOAD and not layer.is_linear:
                raise DomainError(f"layer {i} ({layer.kind.name}) is non-linear and must stay local")
            if p == PLACE_OFFLOAD and self.confidentiality_k is not None and not layer.has_params:
                raise DomainError(f"layer {i} has no parameters to share; keep it local")
        return placement


@dataclass
class InferenceRecord:
    """Client-side state for one inference.

    Holistic records hold the commitment, the output, and shape metadata;
    that is the entire persistent footprint. Layered records additionally
    retain the locally produced intermediates, which is what makes
    worker-free verification possible.
    """

    inference_id: int
    mode: str
    verify_ratio: float
    commit: MerkleCommit | None
    output: Tensor
    shapes: tuple[tuple[int, ...], ...]
    sliceable: tuple[bool, ...]
    status: str = "unverified"
    checked_fraction: float = 0.0
    evidence: tuple[tuple[int, int], ...] = ()
    intermediates: list[Tensor] | None = None

    def layouts(self) -> list[UnitLayout]:
        return [
            slice_layout(s, self.verify_ratio, f)
            for s, f in zip(self.shapes, self.sliceable)
        ]

    def nbytes(self) -> int:
        """Persistent footprint, excluding layered-mode intermediates."""
        n = self.output.nbytes + 16
        if self.commit is not None:
            n += 32 * (1 + len(self.commit.layer_roots)) + 8
        n += sum(4 + 4 * len(s) for s in self.shapes) + len(self.sliceable)
        return n


@dataclass(frozen=True)
class VerificationVerdict:
    status: str  # "passed" | "failed_proof" | "failed_recompute"
    checked_fraction: float
    evidence: tuple[tuple[int, int], ...] = ()
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "passed"


def choose_units(n_units: int, count: int, rng) -> np.ndarray:
    """Uniform selection of count distinct units out of n_units."""
    if count > n_units:
        raise DomainError(f"cannot select {count} of {n_units} units")
    return np.sort(rng.permutation(n_units)[:count])


def select_verification(
    record: InferenceRecord,
    fraction: float,
    rng_seed: int,
    intermediates: list[int] | None = None,
) -> list[tuple[int, Region]]:
    """Pick ceil(fraction * n) committed units uniformly without replacement.

    The pool spans the layer-output intermediates (pass `intermediates` to
    restrict it further); the model input's units are not selected because
    their binding was already checked against the sent input when the
    response arrived. Deterministic for a fixed seed.
    """
    if record.commit is None:
        raise OffguardError("layered records are verified locally; no commitment to open")
    if fraction > 1.0 or fraction <= 0.0:
        raise DomainError(f"fraction must be in (0, 1], got {fraction}")
    if fraction < record.verify_ratio - 1e-9:
        raise GranularityError(
            f"fraction {fraction} finer than committed verify ratio {record.verify_ratio}"
        )
    layouts = record.layouts()
    if intermediates is None:
        intermediates = list(range(1, len(layouts)))
    pool: list[tuple[int, int]] = []
    for ii in intermediates:
        if not (0 <= ii < len(layouts)):
            raise DomainError(f"intermediate index {ii} out of range")
        pool.extend((ii, ui) for ui in range(len(layouts[ii])))
    count = math.ceil(fraction * len(pool))
    picked = choose_units(len(pool), count, rng_from_seed(rng_seed))
    return [(pool[i][0], layouts[pool[i][0]].units[pool[i][1]]) for i in picked]


def detection_failure_probability(n: int, alpha: float, beta: float, iterations: int = 1) -> float:
    """Chance that checking ceil(alpha*n) of n units misses ceil(beta*n)
    corrupted ones in every one of `iterations` independent rounds:
    (C(n-b, a) / C(n, a)) ** iterations, computed in log space.

    beta = 0 is the degenerate control: nothing is corrupted, so the miss
    rate is 1 for every alpha.
    """
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    if not (0.0 < alpha <= 1.0) or not (0.0 <= beta <= 1.0):
        raise DomainError("alpha must be in (0, 1] and beta in [0, 1]")
    if iterations < 1:
        raise DomainError("iterations must be >= 1")
    if beta == 0.0:
        return 1.0
    a = math.ceil(alpha * n)
    b = math.ceil(beta * n)
    if a + b > n:
        return 0.0

    def lchoose(m: int, k: int) -> float:
        return math.lgamma(m + 1) - math.lgamma(k + 1) - math.lgamma(m - k + 1)

    return math.exp(iterations * (lchoose(n - b, a) - lchoose(n, a)))


class OffloadClient:
    """Drives one offload plan against its worker session(s)."""

    def __init__(
        self,
        model: ModelSpec,
        sessions: list[Session],
        plan: OffloadPlan,
        rng_seed: int = 0,
    ):
        plan.resolved_placement(model)  # validate
        if len(sessions) != plan.workers_needed:
            raise DomainError(
                f"plan needs exactly {plan.workers_needed} worker(s), got {len(sessions)}"
            )
        self.model = model
        self.sessions = sessions
        self.plan = plan
        self.shapes = tuple(tuple(s) for s in infer_shapes(model))
        self.rng_seed = rng_seed
        self.mask_sets: dict[int, MaskSet] = {}
        self.records: dict[int, InferenceRecord] = {}
        self._verify_queue: deque[tuple[int, float, int]] = deque()
        # ids must stay unique on the worker even across client restarts and
        # other clients of the same worker, so each client draws a random
        # 32-bit id-space and counts within it
        self._id_space = int.from_bytes(os.urandom(4), "little") << 32
        self._next_id = 0
        self._mask_generation = 0
        self._lock = threading.Lock()

    # -- setup ----------------------------------------------------------------

    def setup(self) -> None:
        """Ship model parameters to the worker(s) per the plan."""
        if self.plan.confidentiality_k is not None:
            plus_layers, minus_layers = [], []
            for i, layer in enumerate(self.model.layers):
                if layer.has_params:
                    shares = split_weights(
                        layer, self.plan.confidentiality_k, self._derived_seed(1000 + i)
                    )
                    plus_layers.append(shares.share_plus)
                    minus_layers.append(shares.share_minus)
                else:
                    plus_layers.append(layer)
                    minus_layers.append(layer)
            models = [
                (ROLE_SHARE_PLUS, ModelSpec(plus_layers, self.model.input_shape)),
                (ROLE_SHARE_MINUS, ModelSpec(minus_layers, self.model.input_shape)),
            ]
        else:
            models = [(ROLE_FULL, self.model)]
        for session, (role, m) in zip(self.sessions, models):
            ack = session.checked_request(SetupModel(role, model_to_bytes(m)))
            if not isinstance(ack, SetupAck) or ack.role != role:
                raise OffguardError(f"unexpected setup reply {ack!r}")

    def prepare_masks(
        self,
        count: int,
        input_ranges: dict[int, tuple[float, float]] | None = None,
        generation: int | None = None,
    ) -> None:
        """Pre-generate `count` one-time masks per offloaded layer.

        input_ranges maps layer index to the value range its inputs take;
        layers not listed use (0, 1). Hidden-layer ranges depend on the
        data that reaches them, so callers that offload hidden layers
        should measure a range (e.g. from a calibration run) and pass it.

        Each call draws from a fresh generation of the mask stream (an
        internal counter, or the explicit `generation`), so repeated
        stockpiling never re-issues an epsilon that an earlier pool may
        already have spent. Masks are one-time values: persist pools
        across restarts (save_mask_set / load_mask_set) instead of
        regenerating them with the same seed.
        """
        if self.plan.privacy_k is None:
            return
        if generation is None:
            with self._lock:
                generation = self._mask_generation
                self._mask_generation += 1
        input_ranges = input_ranges or {}
        placement = self.plan.resolved_placement(self.model)
        for i, (p, layer) in enumerate(zip(placement, self.model.layers)):
            if p != PLACE_OFFLOAD:
                continue
            self.mask_sets[i] = generate_masks(
                layer,
                self.shapes[i],
                count,
                self.plan.privacy_k,
                input_ranges.get(i, (0.0, 1.0)),
                rng_seed=self._derived_seed(2000 + i + 10_000 * (generation + 1)),
                layer_index=i,
            )

    def _derived_seed(self, stream: int) -> int:
        return (self.rng_seed * 1_000_003 + stream) & (1 << 63) - 1

    def _alloc_id(self) -> int:
        with self._lock:
            nid = self._id_space | self._next_id
            self._next_id += 1
            return nid

    # -- inference -------------------------------------------------------------

    def offload_infer(self, x: Tensor) -> tuple[Tensor, InferenceRecord]:
        x = as_tensor(x)
        if self.plan.mode == MODE_HOLISTIC:
            return self._infer_holistic(x)
        return self._infer_layered(x)

    def _infer_holistic(self, x: Tensor) -> tuple[Tensor, InferenceRecord]:
        inference_id = self._alloc_id()
        req = InferRequest(inference_id, MODE_HOLISTIC, x, self.plan.verify_ratio)
        resp = self.sessions[0].checked_request(req)
        if not isinstance(resp, InferResponse) or resp.inference_id != inference_id:
            raise OffguardError(f"unexpected inference reply {type(resp).__name__}")
        if tuple(resp.output.shape) != self.shapes[-1]:
            raise ShapeError(
                f"worker output shape {tuple(resp.output.shape)} != expected {self.shapes[-1]}"
            )
        sliceable = tuple(
            intermediate_sliceable(self.model, i) for i in range(len(self.shapes))
        )
        self._check_commit_binding(resp.commit, x, sliceable)
        record = InferenceRecord(
            inference_id=inference_id,
            mode=MODE_HOLISTIC,
            verify_ratio=self.plan.verify_ratio,
            commit=resp.commit,
            output=resp.output,
            shapes=self.shapes,
            sliceable=sliceable,
        )
        self.records[inference_id] = record
        return resp.output, record

    def _check_commit_binding(self, commit: MerkleCommit, x: Tensor, sliceable) -> None:
        """Reject a response whose commit is inconsistent or binds a
        different input than the one we sent. Runs while x is still in
        hand, so nothing beyond the commit needs storing."""
        if len(commit.layer_roots) != len(self.shapes):
            raise CommitMismatchError(
                f"commit covers {len(commit.layer_roots)} intermediates, expected {len(self.shapes)}"
            )
        if reduce_layer_roots(commit.layer_roots) != commit.root:
            raise CommitMismatchError("commit root does not reduce from its layer roots")
        input_layout = slice_layout(self.shapes[0], self.plan.verify_ratio, sliceable[0])
        expected = build_commit([x], [input_layout]).layer_roots[0]
        if commit.layer_roots[0] != expected:
            raise CommitMismatchError("commit does not bind the input that was sent")

    def _offload_one_layer(self, layer_index: int, h: Tensor) -> Tensor:
        """One layer on the worker(s), with masking/shares per the plan."""
        mask_id = None
        if self.plan.privacy_k is not None:
            mask_set = self.mask_sets.get(layer_index)
            if mask_set is None:
                raise OffguardError(f"no masks prepared for layer {layer_index}")
            h, mask_id = mask_input(h, mask_set)
        inference_id = self._alloc_id()
        req = InferRequest(inference_id, MODE_LAYER, h, self.plan.verify_ratio, layer_index)
        if len(self.sessions) > 1:
            # both share-workers get the same request concurrently and are joined
            with ThreadPoolExecutor(max_workers=len(self.sessions)) as pool:
                replies = list(pool.map(lambda s: s.checked_request(req), self.sessions))
        else:
            replies = [self.sessions[0].checked_request(req)]
        outs = []
        for resp in replies:
            if not isinstance(resp, InferResponse) or resp.inference_id != inference_id:
                raise OffguardError(f"unexpected layer reply {type(resp).__name__}")
            outs.append(resp.output)
        if self.plan.confidentiality_k is not None:
            y = combine_shares(outs[0], outs[1])
        else:
            y = outs[0]
        if mask_id is not None:
            y = unmask_output(y, self.mask_sets[layer_index], mask_id)
        return y

    def _infer_layered(self, x: Tensor) -> tuple[Tensor, InferenceRecord]:
        placement = self.plan.resolved_placement(self.model)
        intermediates = [x]
        for i, layer in enumerate(self.model.layers):
            h = intermediates[-1]
            if placement[i] == PLACE_LOCAL:
                y = forward_layer(layer, h, index=i)
            else:
                y = self._offload_one_layer(i, h)
                if tuple(y.shape) != self.shapes[i + 1]:
                    raise ShapeError(
                        f"layer {i}: worker output shape {tuple(y.shape)} != expected {self.shapes[i + 1]}"
                    )
            intermediates.append(y)
        record = InferenceRecord(
            inference_id=self._alloc_id(),
            mode=MODE_LAYERED,
            verify_ratio=self.plan.verify_ratio,
            commit=None,
            output=intermediates[-1],
            shapes=self.shapes,
            sliceable=tuple(intermediate_sliceable(self.model, i) for i in range(len(self.shapes))),
            intermediates=intermediates,
        )
        self.records[record.inference_id] = record
        return intermediates[-1], record

    # -- verification ----------------------------------------------------------

    def verify_layer_local(self, record: InferenceRecord, layer_index: int) -> VerificationVerdict:
        """Layered-mode check: recompute one layer from the stored
        intermediates, no worker involved."""
        if record.intermediates is None:
            raise OffguardError("record has no stored intermediates")
        want = forward_layer(self.model.layers[layer_index], record.intermediates[layer_index])
        got = record.intermediates[layer_index + 1]
        if np.allclose(got, want, rtol=RECOMPUTE_RTOL, atol=RECOMPUTE_ATOL):
            return VerificationVerdict("passed", 1.0)
        return VerificationVerdict(
            "failed_recompute", 1.0, ((layer_index + 1, 0),), f"layer {layer_index} mismatch"
        )

    def verify_async(
        self,
        record: InferenceRecord,
        selection: list[tuple[int, Region]],
        session: Session | None = None,
    ) -> VerificationVerdict:
        """Fetch an opening proof for the selection and recheck it.

        Fails on the proof itself (bad path, wrong inference) or on
        recomputation (opened values not reproducible from the opened
        inputs within tolerance, with the offending units as evidence).
        Transport problems raise; they are retryable, not verdicts.
        """
        if record.commit is None:
            raise OffguardError("layered records are verified locally")
        session = session or self.sessions[0]
        layouts = record.layouts()

        regions: list[tuple[int, Region]] = []
        checks: list[tuple[int, int, Region]] = []  # (ii, ui, out region)
        for ii, region in selection:
            if ii < 1 or ii >= len(layouts):
                raise DomainError(f"selection names intermediate {ii}")
            cover = layouts[ii].covering_units(region)
            for ui in cover:
                checks.append((ii, ui, layouts[ii].units[ui]))
            regions.append((ii, region))
            in_region = receptive_region(
                self.model.layers[ii - 1], region, self.shapes[ii - 1]
            )
            regions.append((ii - 1, in_region))

        reply = session.checked_request(VerifyRequest(record.inference_id, tuple(regions)))
        if not isinstance(reply, VerifyResponse):
            raise OffguardError(f"unexpected verify reply {type(reply).__name__}")
        proof = proof_from_bytes(reply.proof_bytes)

        fraction = len({(ii, ui) for ii, ui, _ in checks}) / max(record.commit.leaf_count, 1)
        if proof.inference_id != record.inference_id:
            return self._conclude(
                record, "failed_proof", fraction, (), "proof names a different inference"
            )
        if not verify_proof(record.commit, proof):
            return self._conclude(record, "failed_proof", fraction, (), "opening does not reach the committed root")

        opened: dict[tuple[int, int], bytes] = {
            (u.intermediate_index, u.unit_index): u.data for u in proof.opened
        }
        mismatched: list[tuple[int, int]] = []
        for ii, ui, out_region in checks:
            verdict = self._recompute_unit(record, layouts, opened, ii, ui, out_region)
            if verdict is None:
                return self._conclude(
                    record, "failed_proof", fraction, (), f"proof does not open unit ({ii}, {ui})"
                )
            if not verdict:
                mismatched.append((ii, ui))
        if mismatched:
            return self._conclude(
                record, "failed_recompute", fraction, tuple(mismatched), "recomputation mismatch"
            )
        return self._conclude(record, "passed", fraction, (), "")

    def _recompute_unit(self, record, layouts, opened, ii, ui, out_region) -> bool | None:
        """True/False for match/mismatch; None when the proof lacks a unit.

        The opened unit is recomputed from the opened covering units of
        the layer's input region; a claimed unit that cannot even be
        parsed back into its declared extent counts as a mismatch (those
        bytes are what the worker committed to).
        """
        claimed_raw = opened.get((ii, ui))
        if claimed_raw is None:
            return None
        unit_region = layouts[ii].units[ui]
        if len(claimed_raw) != 4 * unit_region.size():
            return False
        claimed = (
            np.frombuffer(claimed_raw, dtype="<f4").astype(_F32).reshape(unit_region.extent)
        )
        layer = self.model.layers[ii - 1]
        in_shape = self.shapes[ii - 1]
        in_region = receptive_region(layer, unit_region, in_shape)
        patch = np.zeros(in_shape, dtype=_F32)
        for uj in layouts[ii - 1].covering_units(in_region):
            raw = opened.get((ii - 1, uj))
            if raw is None:
                return None
            ureg = layouts[ii - 1].units[uj]
            if len(raw) != 4 * ureg.size():
                return False
            patch[ureg.slices()] = np.frombuffer(raw, dtype="<f4").reshape(ureg.extent)
        recomputed = forward_region(
            layer, patch, whole_region(in_shape), unit_region, in_shape
        )
        return bool(np.allclose(recomputed, claimed, rtol=RECOMPUTE_RTOL, atol=RECOMPUTE_ATOL))

    def _conclude(self, record, status, fraction, evidence, detail) -> VerificationVerdict:
        record.status = status
        record.checked_fraction = fraction
        record.evidence = evidence
        return VerificationVerdict(status, fraction, evidence, detail)

    # -- verification queue ------------------------------------------------------

    def queue_verification(self, inference_id: int, fraction: float, rng_seed: int) -> None:
        self._verify_queue.append((inference_id, fraction, rng_seed))

    def drain_one(self) -> VerificationVerdict | None:
        """Run one queued verification; call from any idle moment."""
        if not self._verify_queue:
            return None
        inference_id, fraction, seed = self._verify_queue.popleft()
        record = self.records[inference_id]
        selection = select_verification(record, fraction, seed)
        return self.verify_async(record, selection)


# ---------------------------------------------------------------------------
# record persistence (directory of binary files; format in PROTOCOL.md)

RECORD_MAGIC = b"VSRC"
RECORD_VERSION = 1

_STATUS_BYTE = {"unverified": 0, "passed": 1, "failed_proof": 2, "failed_recompute": 3}
_STATUS_NAME = {v: k for k, v in _STATUS_BYTE.items()}


def record_to_bytes(record: InferenceRecord) -> bytes:
    out = bytearray(RECORD_MAGIC)
    out += pack_u16(RECORD_VERSION)
    out += pack_u64(record.inference_id)
    out += pack_u8(0 if record.mode == MODE_HOLISTIC else 1)
    out += pack_f32(record.verify_ratio)
    out += pack_u8(_STATUS_BYTE[record.status])
    out += pack_f32(record.checked_fraction)
    out += pack_u32(len(record.evidence))
    for ii, ui in record.evidence:
        out += pack_u32(ii)
        out += pack_u32(ui)
    if record.commit is None:
        out += pack_u8(0)
    else:
        out += pack_u8(1)
        out += record.commit.root
        out += pack_u64(record.commit.leaf_count)
        out += pack_u32(len(record.commit.layer_roots))
        for h in record.commit.layer_roots:
            out += h
    out += tensor_to_bytes(record.output)
    out += pack_u32(len(record.shapes))
    for shape, sl in zip(record.shapes, record.sliceable):
        out += pack_u32(len(shape))
        for d in shape:
            out += pack_u32(d)
        out += pack_u8(1 if sl else 0)
    if record.intermediates is None:
        out += pack_u8(0)
    else:
        out += pack_u8(1)
        out += pack_u32(len(record.intermediates))
        for t in record.intermediates:
            out += tensor_to_bytes(t)
    return bytes(out)


def record_from_bytes(buf: bytes) -> InferenceRecord:
    r = Reader(buf)
    if r.take(4) != RECORD_MAGIC:
        raise BadMagicError("not a record file")
    version = r.u16()
    if version != RECORD_VERSION:
        raise UnknownTypeError(f"unsupported record version {version}")
    inference_id = r.u64()
    mode = MODE_HOLISTIC if r.u8() == 0 else MODE_LAYERED
    verify_ratio = r.f32()
    status = _STATUS_NAME.get(r.u8())
    if status is None:
        raise UnknownTypeError("unknown record status")
    checked_fraction = r.f32()
    n_ev = r.u32()
    evidence = tuple((r.u32(), r.u32()) for _ in range(n_ev))
    commit = None
    if r.u8() == 1:
        root = r.take(32)
        leaf_count = r.u64()
        n_roots = r.u32()
        commit = MerkleCommit(root, leaf_count, tuple(r.take(32) for _ in range(n_roots)))
    output = read_tensor(r)
    n_shapes = r.u32()
    shapes, sliceable = [], []
    for _ in range(n_shapes):
        rank = r.u32()
        shapes.append(tuple(r.u32() for _ in range(rank)))
        sliceable.append(r.u8() == 1)
    intermediates = None
    if r.u8() == 1:
        intermediates = [read_tensor(r) for _ in range(r.u32())]
    r.expect_end()
    return InferenceRecord(
        inference_id=inference_id,
        mode=mode,
        verify_ratio=verify_ratio,
        commit=commit,
        output=output,
        shapes=tuple(shapes),
        sliceable=tuple(sliceable),
        status=status,
        checked_fraction=checked_fraction,
        evidence=evidence,
        intermediates=intermediates,
    )


def save_record(directory, record: InferenceRecord) -> str:
    import os

    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"{record.inference_id:016x}.rec")
    with open(path, "wb") as f:
        f.write(record_to_bytes(record))
    return path


def load_record(path) -> InferenceRecord:
    with open(path, "rb") as f:
        return record_from_bytes(f.read())


def list_records(directory) -> list[InferenceRecord]:
    import os

    if not os.path.isdir(directory):
        return []
    out = []
    for name in sorted(os.listdir(directory)):
        if name.endswith(".rec"):
            out.append(load_record(os.path.join(directory, name)))
    return out

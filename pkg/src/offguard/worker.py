"""The untrusted worker service.

A worker stores models (by role), executes inferences, commits to every
intermediate tensor, and keeps only the inputs: when a verifier later asks
for intermediate values the worker silently re-runs the inference from the
stored input, which reproduces the committed bytes exactly because the
kernels are deterministic on one build.

For experiments the worker can be configured to cheat: perturb a chosen
fraction of one layer's output units before hashing, then continue the
forward pass from the perturbed tensor. The commitment then binds the
wrong values and the downstream transcript stays self-consistent, so the
lie is only catchable by recomputing the corrupted units themselves.
"""

from __future__ import annotations

import hashlib
import math
import os
import socket
import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .commitment import MerkleCommit, build_commit, model_layouts, open_units, proof_to_bytes
from .container import model_from_bytes
from .errors import (
    EvictedError,
    OffguardError,
    ParseError,
    RoleMismatchError,
    ShapeError,
    UnknownInferenceError,
)
from .masking import rng_from_seed
from .nn import ModelSpec, forward_layer
from .protocol import (
    MAGIC,
    MODE_HOLISTIC,
    PROTOCOL_VERSION,
    ErrorCode,
    ErrorMessage,
    InferRequest,
    InferResponse,
    Message,
    ROLE_FULL,
    ROLE_SHARE_MINUS,
    ROLE_SHARE_PLUS,
    ROLE_SINGLE_LAYER,
    SetupAck,
    SetupModel,
    VerifyRequest,
    VerifyResponse,
    decode_exactly_one,
    encode,
)
from .tensor import Tensor
from .transport import read_frame

_F32 = np.float32


@dataclass(frozen=True)
class Honest:
    pass


@dataclass(frozen=True)
class Cheat:
    """Perturb ceil(beta * n) randomly chosen units of target_layer's output.

    The perturbation adds +1.0 to every element of each chosen unit and is
    drawn from a per-inference seeded stream, so replays reproduce it.
    """

    beta: float
    target_layer: int
    seed: int = 0


def choose_cheat_units(n_units: int, beta: float, rng) -> np.ndarray:
    """The corrupted-unit draw: ceil(beta*n) distinct units, uniform."""
    b = min(math.ceil(beta * n_units), n_units)
    return np.sort(rng.permutation(n_units)[:b])


@dataclass
class WorkerRecord:
    inference_id: int
    input: Tensor
    commit: MerkleCommit
    verify_ratio: float
    mode: str
    layer_index: int | None
    model_key: tuple

    def nbytes(self) -> int:
        # Everything this worker retains for one inference: the input, the
        # commit hashes, and fixed-size bookkeeping. No intermediates.
        return self.input.nbytes + 32 * (1 + len(self.commit.layer_roots)) + 64


class WorkerCore:
    """Protocol-level worker logic, transport-agnostic and thread-safe.

    store_dir, when set, keeps a copy of each received model container on
    disk (one file per role) so an operator can inspect or re-seed a
    restarted worker; inference records themselves live in memory only.
    """

    def __init__(
        self,
        behavior: Honest | Cheat = Honest(),
        capacity: int = 1024,
        store_dir: str | None = None,
    ):
        self.behavior = behavior
        self.capacity = capacity
        self.store_dir = store_dir
        self._models: dict[tuple, tuple[ModelSpec, bytes]] = {}
        self._records: OrderedDict[int, WorkerRecord] = OrderedDict()
        self._evicted: set[int] = set()
        self._lock = threading.Lock()

    # -- model resolution ---------------------------------------------------

    @staticmethod
    def _role_key(role: str, layer_index: int | None) -> tuple:
        return (role, layer_index) if role == ROLE_SINGLE_LAYER else (role,)

    def _resolve(self, mode: str, layer_index: int | None) -> tuple[tuple, ModelSpec, int]:
        """Returns (model key, model, index of the layer to run or -1)."""
        with self._lock:
            if mode == MODE_HOLISTIC:
                key = (ROLE_FULL,)
                if key not in self._models:
                    raise RoleMismatchError("holistic inference needs a full model; none stored")
                return key, self._models[key][0], -1
            key = (ROLE_SINGLE_LAYER, layer_index)
            if key in self._models:
                return key, self._models[key][0], 0
            for role in (ROLE_FULL, ROLE_SHARE_PLUS, ROLE_SHARE_MINUS):
                if (role,) in self._models:
                    model = self._models[(role,)][0]
                    if not (0 <= layer_index < len(model.layers)):
                        raise ShapeError(
                            f"layer index {layer_index} out of range for {len(model.layers)}-layer model"
                        )
                    return (role,), model, layer_index
            raise RoleMismatchError(f"no stored model can serve layer {layer_index}")

    # -- handlers -------------------------------------------------------------

    def handle_setup(self, msg: SetupModel) -> SetupAck:
        model = model_from_bytes(msg.model_bytes)  # validates the container
        digest = hashlib.sha256(msg.model_bytes).digest()
        key = self._role_key(msg.role, msg.layer_index)
        with self._lock:
            existing = self._models.get(key)
            if existing is not None and existing[1] == digest:
                return SetupAck(msg.role)  # idempotent re-send
            self._models[key] = (model, digest)
            # A replaced model invalidates records that would replay under it.
            stale = [rid for rid, rec in self._records.items() if rec.model_key == key]
            for rid in stale:
                del self._records[rid]
                self._evicted.add(rid)
        if self.store_dir is not None:
            os.makedirs(self.store_dir, exist_ok=True)
            name = "_".join(str(p) for p in key) + ".model"
            with open(os.path.join(self.store_dir, name), "wb") as f:
                f.write(msg.model_bytes)
        return SetupAck(msg.role)

    def _run(self, model: ModelSpec, x: Tensor, req: InferRequest):
        """Forward pass producing (intermediates, layouts), cheating included."""
        layer_index = None if req.mode == MODE_HOLISTIC else req.layer_index
        layouts = model_layouts(model, req.verify_ratio, layer_index)
        cheat = self.behavior if isinstance(self.behavior, Cheat) else None

        if layer_index is None:
            run_layers = list(enumerate(model.layers))
            if tuple(x.shape) != tuple(model.input_shape):
                raise ShapeError(f"input: expected shape {model.input_shape}, got {tuple(x.shape)}")
        else:
            run_layers = [(layer_index, model.layers[layer_index])]

        intermediates = [x]
        for pos, (li, layer) in enumerate(run_layers):
            h = forward_layer(layer, intermediates[-1], index=li)
            if cheat is not None and cheat.target_layer == li:
                layout = layouts[pos + 1]
                rng = rng_from_seed(cheat.seed, stream=req.inference_id)
                corrupted = choose_cheat_units(len(layout), cheat.beta, rng)
                h = h.copy()
                for ui in corrupted:
                    region = layout.units[int(ui)]
                    h[region.slices()] += _F32(1.0)
            intermediates.append(h)
        return intermediates, layouts

    def handle_infer(self, req: InferRequest) -> InferResponse:
        key, model, _ = self._resolve(req.mode, req.layer_index)
        intermediates, layouts = self._run(model, req.input, req)
        commit = build_commit(intermediates, layouts)
        record = WorkerRecord(
            inference_id=req.inference_id,
            input=req.input,
            commit=commit,
            verify_ratio=req.verify_ratio,
            mode=req.mode,
            layer_index=req.layer_index,
            model_key=key,
        )
        with self._lock:
            self._records[req.inference_id] = record
            self._records.move_to_end(req.inference_id)
            while len(self._records) > self.capacity:
                rid, _ = self._records.popitem(last=False)
                self._evicted.add(rid)
        # Intermediates go out of scope here: the record keeps input + commit only.
        return InferResponse(req.inference_id, intermediates[-1], commit)

    def handle_verify(self, req: VerifyRequest) -> VerifyResponse:
        with self._lock:
            record = self._records.get(req.inference_id)
            if record is None:
                if req.inference_id in self._evicted:
                    raise EvictedError(f"record {req.inference_id} was evicted")
                raise UnknownInferenceError(f"no record for inference {req.inference_id}")
            model = self._models[record.model_key][0]
        replay = InferRequest(
            record.inference_id,
            record.mode,
            record.input,
            record.verify_ratio,
            record.layer_index,
        )
        intermediates, layouts = self._run(model, record.input, replay)
        commit = build_commit(intermediates, layouts)
        if commit.root != record.commit.root:
            # Deterministic replay is a prerequisite for answering openings.
            raise OffguardError("replay diverged from committed inference")
        proof = open_units(intermediates, layouts, list(req.regions), req.inference_id)
        return VerifyResponse(req.inference_id, proof_to_bytes(proof))

    # -- dispatch -------------------------------------------------------------

    def handle_message(self, msg: Message) -> Message:
        try:
            if isinstance(msg, SetupModel):
                return self.handle_setup(msg)
            if isinstance(msg, InferRequest):
                return self.handle_infer(msg)
            if isinstance(msg, VerifyRequest):
                return self.handle_verify(msg)
            return ErrorMessage(ErrorCode.BAD_REQUEST, f"unexpected {type(msg).__name__}")
        except RoleMismatchError as exc:
            return ErrorMessage(ErrorCode.ROLE_MISMATCH, str(exc))
        except ShapeError as exc:
            return ErrorMessage(ErrorCode.SHAPE_MISMATCH, str(exc))
        except UnknownInferenceError as exc:
            return ErrorMessage(ErrorCode.UNKNOWN_INFERENCE, str(exc))
        except EvictedError as exc:
            return ErrorMessage(ErrorCode.EVICTED, str(exc))
        except ParseError as exc:
            return ErrorMessage(ErrorCode.MALFORMED, str(exc))
        except OffguardError as exc:
            return ErrorMessage(ErrorCode.BAD_REQUEST, str(exc))
        except Exception as exc:  # noqa: BLE001 - worker must answer something
            return ErrorMessage(ErrorCode.INTERNAL, f"{type(exc).__name__}: {exc}")

    def handle_frame(self, frame: bytes) -> bytes:
        try:
            msg = decode_exactly_one(frame)
        except ParseError as exc:
            return encode(ErrorMessage(ErrorCode.MALFORMED, str(exc)))
        return encode(self.handle_message(msg))

    # -- introspection (tests, byte accounting) -------------------------------

    def record_nbytes(self, inference_id: int) -> int:
        with self._lock:
            return self._records[inference_id].nbytes()

    def record_count(self) -> int:
        with self._lock:
            return len(self._records)

    def cheat_units_for(self, inference_id: int) -> dict[int, list[int]]:
        """Replays the corruption draw for a stored inference (test hook)."""
        if not isinstance(self.behavior, Cheat):
            return {}
        with self._lock:
            record = self._records.get(inference_id)
            if record is None:
                raise UnknownInferenceError(str(inference_id))
            model = self._models[record.model_key][0]
        layer_index = None if record.mode == MODE_HOLISTIC else record.layer_index
        layouts = model_layouts(model, record.verify_ratio, layer_index)
        target = self.behavior.target_layer
        pos = target + 1 if layer_index is None else 1
        if layer_index is not None and layer_index != target:
            return {}
        rng = rng_from_seed(self.behavior.seed, stream=inference_id)
        units = choose_cheat_units(len(layouts[pos]), self.behavior.beta, rng)
        return {pos: [int(u) for u in units]}


# ---------------------------------------------------------------------------
# TCP service


def _serve_connection(core: WorkerCore, conn: socket.socket) -> None:
    try:
        greeting = b""
        while len(greeting) < 5:
            chunk = conn.recv(5 - len(greeting))
            if not chunk:
                return
            greeting += chunk
        if greeting[:4] != MAGIC or greeting[4] != PROTOCOL_VERSION:
            conn.sendall(MAGIC + bytes([PROTOCOL_VERSION]))
            return  # refuse: answer with our version and hang up
        conn.sendall(MAGIC + bytes([PROTOCOL_VERSION]))
        while True:
            try:
                frame = read_frame(conn)
            except OffguardError:
                return
            conn.sendall(core.handle_frame(frame))
    except OSError:
        return
    finally:
        conn.close()


def serve(core: WorkerCore, host: str, port: int, ready_callback=None) -> None:
    """Blocking accept loop; one thread per connection."""
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host, port))
    listener.listen(16)
    bound = listener.getsockname()
    print(f"worker listening on {bound[0]}:{bound[1]}", flush=True)
    if ready_callback is not None:
        ready_callback(bound)
    while True:
        conn, _ = listener.accept()
        t = threading.Thread(target=_serve_connection, args=(core, conn), daemon=True)
        t.start()

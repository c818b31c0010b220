import itertools
import math

import numpy as np
import pytest

import offguard as og
from offguard.client import (
    MODE_LAYERED,
    choose_units,
    list_records,
    load_record,
    record_to_bytes,
    save_record,
)
from offguard.commitment import model_layouts
from offguard.errors import (
    DomainError,
    GranularityError,
    OutOfMasksError,
    WorkerFault,
)
from offguard.masking import rng_from_seed
from offguard.protocol import ErrorCode, SetupModel, VerifyResponse
from offguard.container import model_to_bytes
from offguard.tensor import as_tensor
from offguard.transport import DirectSession, Session
from offguard.worker import Cheat, WorkerCore


def _x(mlp, seed=0):
    return as_tensor(np.random.default_rng(seed).uniform(0, 1, mlp.input_shape).astype(np.float32))


# --- setup ------------------------------------------------------------------


def test_setup_then_holistic(honest_stack, mlp):
    core, client = honest_stack
    x = _x(mlp)
    y, record = client.offload_infer(x)
    want, _ = og.forward_model(mlp, x)
    # same build, same process: bit-exact
    assert y.tobytes() == want.tobytes()
    assert record.status == "unverified"


def test_share_only_worker_refuses_holistic(mlp):
    core = WorkerCore()
    session = DirectSession(core)
    session.checked_request(SetupModel("share_plus", model_to_bytes(mlp)))
    client = og.OffloadClient(mlp, [session], og.OffloadPlan())
    with pytest.raises(WorkerFault) as err:
        client.offload_infer(_x(mlp))
    assert err.value.code == ErrorCode.ROLE_MISMATCH


def test_setup_identical_resend_is_idempotent(honest_stack, mlp):
    core, client = honest_stack
    client.offload_infer(_x(mlp))
    n_before = core.record_count()
    client.setup()  # identical payload again
    assert core.record_count() == n_before
    client.offload_infer(_x(mlp, seed=1))
    assert core.record_count() == n_before + 1


def test_malformed_container_rejected():
    core = WorkerCore()
    session = DirectSession(core)
    with pytest.raises(WorkerFault) as err:
        session.checked_request(SetupModel("full", b"garbage"))
    assert err.value.code == ErrorCode.MALFORMED


# --- commitment construction on the worker ------------------------------------


def test_worker_commit_matches_local_reconstruction(mlp):
    # verify_ratio 0.25 on the (16,) hidden output must use the 4+-unit
    # layout of slice_layout; rebuilding the commit locally from our own
    # forward pass must give bit-identical roots.
    core = WorkerCore()
    client = og.OffloadClient(mlp, [DirectSession(core)], og.OffloadPlan(verify_ratio=0.25))
    client.setup()
    x = _x(mlp)
    _, record = client.offload_infer(x)
    _, inter = og.forward_model(mlp, x)
    layouts = model_layouts(mlp, 0.25)
    assert len(layouts[1]) == 4  # (16,) at ratio 0.25
    local = og.build_commit(inter, layouts)
    assert local.root == record.commit.root
    assert local.layer_roots == record.commit.layer_roots


def test_commit_binding_rejects_lying_about_input(mlp):
    class InputSwappingCore(WorkerCore):
        def handle_infer(self, req):
            altered = as_tensor(np.asarray(req.input) + np.float32(0.5))
            from offguard.protocol import InferRequest

            fake = InferRequest(req.inference_id, req.mode, altered, req.verify_ratio, req.layer_index)
            return super().handle_infer(fake)

    core = InputSwappingCore()
    client = og.OffloadClient(mlp, [DirectSession(core)], og.OffloadPlan(verify_ratio=0.5))
    client.setup()
    from offguard.errors import CommitMismatchError

    with pytest.raises(CommitMismatchError):
        client.offload_infer(_x(mlp))


# --- verification: honest and cheating ----------------------------------------


def test_honest_worker_passes_any_selection(honest_stack, mlp):
    core, client = honest_stack
    _, record = client.offload_infer(_x(mlp))
    for fraction, seed in [(0.25, 0), (0.5, 1), (1.0, 2)]:
        selection = og.select_verification(record, fraction, seed)
        verdict = client.verify_async(record, selection)
        assert verdict.passed, verdict
    assert record.status == "passed"


def test_full_beta_cheat_fails_every_opened_unit(mlp):
    core = WorkerCore(behavior=Cheat(beta=1.0, target_layer=0, seed=3))
    client = og.OffloadClient(mlp, [DirectSession(core)], og.OffloadPlan(verify_ratio=0.25))
    client.setup()
    _, record = client.offload_infer(_x(mlp))
    selection = og.select_verification(record, 1.0, 0, intermediates=[1])
    verdict = client.verify_async(record, selection)
    assert verdict.status == "failed_recompute"
    layouts = record.layouts()
    assert set(verdict.evidence) == {(1, ui) for ui in range(len(layouts[1]))}


def test_cheat_on_downstream_layer_is_consistent_elsewhere(mlp):
    # corrupt layer 2's output; layers computed from the corrupted tensor
    # stay self-consistent, so checking other intermediates passes
    core = WorkerCore(behavior=Cheat(beta=1.0, target_layer=2, seed=1))
    client = og.OffloadClient(mlp, [DirectSession(core)], og.OffloadPlan(verify_ratio=0.5))
    client.setup()
    _, record = client.offload_infer(_x(mlp))
    ok = client.verify_async(record, og.select_verification(record, 1.0, 0, intermediates=[1, 2]))
    assert ok.passed
    bad = client.verify_async(record, og.select_verification(record, 1.0, 0, intermediates=[3]))
    assert bad.status == "failed_recompute"


def test_verdict_matches_worker_corruption_exactly(mlp):
    core = WorkerCore(behavior=Cheat(beta=0.3, target_layer=0, seed=11))
    client = og.OffloadClient(mlp, [DirectSession(core)], og.OffloadPlan(verify_ratio=0.25))
    client.setup()
    for trial in range(20):
        _, record = client.offload_infer(_x(mlp, seed=trial))
        corrupted = set(core.cheat_units_for(record.inference_id)[1])
        selection = og.select_verification(record, 0.5, trial, intermediates=[1])
        verdict = client.verify_async(record, selection)
        layouts = record.layouts()
        picked = {layouts[1].units.index(r) for ii, r in selection}
        if picked & corrupted:
            assert verdict.status == "failed_recompute"
            assert set(verdict.evidence) == {(1, u) for u in (picked & corrupted)}
        else:
            assert verdict.passed


def test_tampered_proof_fails_proof_not_recompute(honest_stack, mlp):
    core, client = honest_stack

    class TamperingSession(Session):
        def __init__(self, inner):
            self.inner = inner

        def request(self, msg):
            reply = self.inner.request(msg)
            if isinstance(reply, VerifyResponse):
                raw = bytearray(reply.proof_bytes)
                raw[-1] ^= 0xFF  # flip a byte of an opened value / path hash
                reply = VerifyResponse(reply.inference_id, bytes(raw))
            return reply

    _, record = client.offload_infer(_x(mlp))
    selection = og.select_verification(record, 0.5, 0)
    verdict = client.verify_async(record, selection, session=TamperingSession(client.sessions[0]))
    assert verdict.status == "failed_proof"


def test_unknown_inference_and_eviction(mlp):
    core = WorkerCore(capacity=2)
    client = og.OffloadClient(mlp, [DirectSession(core)], og.OffloadPlan(verify_ratio=0.5))
    client.setup()
    records = [client.offload_infer(_x(mlp, seed=i))[1] for i in range(3)]
    assert core.record_count() == 2
    with pytest.raises(WorkerFault) as err:
        client.verify_async(records[0], og.select_verification(records[0], 1.0, 0))
    assert err.value.code == ErrorCode.EVICTED
    # never-seen id
    ghost = records[1]
    ghost.inference_id = 999_999
    with pytest.raises(WorkerFault) as err:
        client.verify_async(ghost, og.select_verification(ghost, 1.0, 0))
    assert err.value.code == ErrorCode.UNKNOWN_INFERENCE


def test_replay_determinism_byte_identical_proofs(honest_stack, mlp):
    core, client = honest_stack
    _, record = client.offload_infer(_x(mlp))
    from offguard.protocol import VerifyRequest

    req = VerifyRequest(record.inference_id, ((1, record.layouts()[1].units[0]),))
    a = client.sessions[0].checked_request(req)
    b = client.sessions[0].checked_request(req)
    assert a.proof_bytes == b.proof_bytes


def test_worker_storage_excludes_intermediates(conv_net):
    core = WorkerCore()
    client = og.OffloadClient(conv_net, [DirectSession(core)], og.OffloadPlan(verify_ratio=0.25))
    client.setup()
    x = as_tensor(np.random.default_rng(0).uniform(0, 1, conv_net.input_shape).astype(np.float32))
    _, record = client.offload_infer(x)
    _, inter = og.forward_model(conv_net, x)
    intermediate_bytes = sum(t.nbytes for t in inter[1:])
    stored = core.record_nbytes(record.inference_id)
    assert stored <= x.nbytes + 32 * (len(conv_net.layers) + 2) + 128
    assert stored < intermediate_bytes  # commit, not transcripts
    # structural check: the record object holds no tensor except the input
    rec = core._records[record.inference_id]
    tensors = [v for v in vars(rec).values() if isinstance(v, np.ndarray)]
    assert len(tensors) == 1 and tensors[0] is rec.input
    # and verification still works after the intermediates were dropped
    verdict = client.verify_async(record, og.select_verification(record, 0.5, 4))
    assert verdict.passed


# --- selection ---------------------------------------------------------------


def test_select_full_fraction_covers_all_output_units(honest_stack, mlp):
    core, client = honest_stack
    _, record = client.offload_infer(_x(mlp))
    layouts = record.layouts()
    selection = og.select_verification(record, 1.0, 0)
    assert len(selection) == sum(len(layouts[i]) for i in range(1, len(layouts)))


def test_selection_deterministic_under_seed(honest_stack, mlp):
    core, client = honest_stack
    _, record = client.offload_infer(_x(mlp))
    a = og.select_verification(record, 0.5, 1234)
    b = og.select_verification(record, 0.5, 1234)
    c = og.select_verification(record, 0.5, 4321)
    assert a == b
    assert a != c


def test_granularity_error_below_committed_ratio(honest_stack, mlp):
    core, client = honest_stack
    _, record = client.offload_infer(_x(mlp))  # committed at 0.25
    with pytest.raises(GranularityError):
        og.select_verification(record, 0.1, 0)


def test_selection_uniformity_chi_square():
    # 10^4 single-unit draws over a 20-unit layout; chi-square with 19
    # degrees of freedom, critical value 43.82 at p = 0.001
    w = np.random.default_rng(0).normal(size=(20, 1)).astype(np.float32)
    model = og.ModelSpec([og.dense(w, np.zeros(20, dtype=np.float32))], (1,))
    core = WorkerCore()
    client = og.OffloadClient(model, [DirectSession(core)], og.OffloadPlan(verify_ratio=0.05))
    client.setup()
    _, record = client.offload_infer(as_tensor([0.5]))
    layouts = record.layouts()
    assert len(layouts[1]) == 20
    counts = np.zeros(20)
    for seed in range(10_000):
        selection = og.select_verification(record, 0.05, seed, intermediates=[1])
        assert len(selection) == 1
        counts[layouts[1].units.index(selection[0][1])] += 1
    expected = 10_000 / 20
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 43.82, chi2


def test_choose_units_rejects_overdraw():
    with pytest.raises(DomainError):
        choose_units(4, 5, rng_from_seed(0))


# --- detection bound -----------------------------------------------------------


def _enumerate_miss_rate(n, a, b):
    """Exhaustive oracle: fraction of a-subsets avoiding a fixed b-subset."""
    corrupted = set(range(b))
    total = hits = 0
    for pick in itertools.combinations(range(n), a):
        total += 1
        if corrupted.isdisjoint(pick):
            hits += 1
    return hits / total


def test_detection_probability_against_enumeration():
    assert og.detection_failure_probability(4, 0.25, 0.5) == pytest.approx(
        _enumerate_miss_rate(4, 1, 2)
    )
    assert og.detection_failure_probability(4, 0.25, 0.5) == pytest.approx(0.5)
    assert og.detection_failure_probability(4, 0.25, 0.5, iterations=2) == pytest.approx(0.25)
    for n, alpha, beta in [(6, 0.34, 0.34), (9, 0.23, 0.45), (12, 0.5, 0.09)]:
        a, b = math.ceil(alpha * n), math.ceil(beta * n)
        assert og.detection_failure_probability(n, alpha, beta) == pytest.approx(
            _enumerate_miss_rate(n, a, b), rel=1e-9
        )


def test_detection_probability_edge_cases():
    assert og.detection_failure_probability(8, 0.5, 1.0) == 0.0  # everything corrupted
    assert og.detection_failure_probability(100, 0.01, 0.01) == pytest.approx(0.99)
    big = og.detection_failure_probability(10**6, 1e-6, 1e-6)
    assert big == pytest.approx(1 - 1e-6, rel=1e-9)
    # degenerate control: no corruption means nothing can be detected
    for alpha in (0.01, 0.5, 1.0):
        assert og.detection_failure_probability(10, alpha, 0.0) == 1.0
    with pytest.raises(DomainError):
        og.detection_failure_probability(0, 0.5, 0.5)
    with pytest.raises(DomainError):
        og.detection_failure_probability(10, 0.0, 0.5)


def test_layered_confidentiality_close_to_plain(mlp):
    rng = np.random.default_rng(4)
    plan = og.OffloadPlan(mode=MODE_LAYERED, confidentiality_k=10.0)
    client = og.OffloadClient(
        mlp, [DirectSession(WorkerCore()), DirectSession(WorkerCore())], plan, rng_seed=6
    )
    client.setup()
    for seed in range(100):
        x = as_tensor(rng.uniform(0, 1, mlp.input_shape).astype(np.float32))
        y, _ = client.offload_infer(x)
        want, _ = og.forward_model(mlp, x)
        scale = max(float(np.max(np.abs(want))), 1e-6)
        assert float(np.max(np.abs(y - want))) <= 1e-3 * scale


# --- layered offload ------------------------------------------------------------


def test_layered_unmasked_matches_local(mlp):
    core = WorkerCore()
    plan = og.OffloadPlan(mode=MODE_LAYERED)
    client = og.OffloadClient(mlp, [DirectSession(core)], plan)
    client.setup()
    x = _x(mlp)
    y, record = client.offload_infer(x)
    want, inter = og.forward_model(mlp, x)
    np.testing.assert_allclose(y, want, rtol=1e-5, atol=1e-7)
    assert record.intermediates is not None and len(record.intermediates) == len(inter)


def test_layered_privacy_close_to_plain(mlp):
    rng = np.random.default_rng(0)
    core = WorkerCore()
    plan = og.OffloadPlan(mode=MODE_LAYERED, privacy_k=10.0)
    client = og.OffloadClient(mlp, [DirectSession(core)], plan, rng_seed=5)
    client.setup()
    client.prepare_masks(100, input_ranges={0: (0.0, 1.0), 2: (-5.0, 5.0)})
    misses = 0
    for seed in range(100):
        x = as_tensor(rng.uniform(0, 1, mlp.input_shape).astype(np.float32))
        y, _ = client.offload_infer(x)
        want, _ = og.forward_model(mlp, x)
        scale = max(float(np.max(np.abs(want))), 1e-6)
        if float(np.max(np.abs(y - want))) > 1e-3 * scale:
            misses += 1
    assert misses == 0


def test_layered_privacy_plus_confidentiality_argmax(mlp):
    rng = np.random.default_rng(9)
    plan = og.OffloadPlan(mode=MODE_LAYERED, privacy_k=10.0, confidentiality_k=10.0)
    client = og.OffloadClient(
        mlp, [DirectSession(WorkerCore()), DirectSession(WorkerCore())], plan, rng_seed=2
    )
    client.setup()
    client.prepare_masks(100, input_ranges={0: (0.0, 1.0), 2: (-5.0, 5.0)})
    agree = 0
    for seed in range(100):
        x = as_tensor(rng.uniform(0, 1, mlp.input_shape).astype(np.float32))
        y, _ = client.offload_infer(x)
        want, _ = og.forward_model(mlp, x)
        agree += int(np.argmax(y) == np.argmax(want))
    assert agree >= 99


def test_layered_self_sufficient_verification(mlp):
    core = WorkerCore()

    class CountingSession(Session):
        def __init__(self, inner):
            self.inner = inner
            self.calls = 0

        def request(self, msg):
            self.calls += 1
            return self.inner.request(msg)

    session = CountingSession(DirectSession(core))
    plan = og.OffloadPlan(mode=MODE_LAYERED)
    client = og.OffloadClient(mlp, [session], plan)
    client.setup()
    _, record = client.offload_infer(_x(mlp))
    before = session.calls
    for i in range(len(mlp.layers)):
        assert client.verify_layer_local(record, i).passed
    assert session.calls == before  # no worker round trips


def test_layered_local_verification_catches_cheat(mlp):
    core = WorkerCore(behavior=Cheat(beta=1.0, target_layer=0, seed=0))
    plan = og.OffloadPlan(mode=MODE_LAYERED)
    client = og.OffloadClient(mlp, [DirectSession(core)], plan)
    client.setup()
    _, record = client.offload_infer(_x(mlp))
    verdict = client.verify_layer_local(record, 0)
    assert verdict.status == "failed_recompute"


def test_out_of_masks_is_explicit(mlp):
    plan = og.OffloadPlan(mode=MODE_LAYERED, privacy_k=1.0)
    client = og.OffloadClient(mlp, [DirectSession(WorkerCore())], plan)
    client.setup()
    client.prepare_masks(1)
    client.offload_infer(_x(mlp))
    with pytest.raises(OutOfMasksError):
        client.offload_infer(_x(mlp, seed=1))


def test_plan_validation():
    with pytest.raises(DomainError):
        og.OffloadPlan(mode="holistic", privacy_k=1.0)  # masking needs layered
    plan = og.OffloadPlan(mode=MODE_LAYERED, confidentiality_k=1.0)
    assert plan.workers_needed == 2
    mlp = og.ModelSpec([og.relu()], (2,))
    with pytest.raises(DomainError):
        og.OffloadPlan(mode=MODE_LAYERED, placement=("offload",)).resolved_placement(mlp)


def test_client_record_persistence(tmp_path, honest_stack, mlp):
    core, client = honest_stack
    _, record = client.offload_infer(_x(mlp))
    client.verify_async(record, og.select_verification(record, 0.5, 7))
    path = save_record(tmp_path, record)
    back = load_record(path)
    assert back.inference_id == record.inference_id
    assert back.commit == record.commit
    assert back.status == record.status
    assert back.output.tobytes() == record.output.tobytes()
    assert back.shapes == record.shapes
    assert back.sliceable == record.sliceable
    assert [r.inference_id for r in list_records(tmp_path)] == [record.inference_id]
    # the persisted footprint matches the in-memory accounting
    assert abs(len(record_to_bytes(record)) - back.nbytes()) < 256


def test_client_holistic_storage_is_commit_plus_output_plus_metadata(honest_stack, mlp):
    core, client = honest_stack
    _, record = client.offload_infer(_x(mlp))
    raw = record_to_bytes(record)
    budget = record.output.nbytes + 32 * (len(mlp.layers) + 2) + 8 * len(record.shapes) * 4 + 256
    assert len(raw) <= budget
    assert record.intermediates is None


def test_verification_queue_drain(honest_stack, mlp):
    core, client = honest_stack
    _, record = client.offload_infer(_x(mlp))
    client.queue_verification(record.inference_id, 0.5, 3)
    assert client.drain_one().passed
    assert client.drain_one() is None


def test_worker_serves_concurrent_sessions(mlp):
    import threading

    from offguard.worker import serve

    core = WorkerCore()
    ready, evt = {}, threading.Event()

    def cb(bound):
        ready["port"] = bound[1]
        evt.set()

    threading.Thread(
        target=serve, args=(core, "127.0.0.1", 0), kwargs={"ready_callback": cb}, daemon=True
    ).start()
    assert evt.wait(5.0)

    results = {}

    def run(idx):
        session = og.TcpSession("127.0.0.1", ready["port"])
        client = og.OffloadClient(mlp, [session], og.OffloadPlan(verify_ratio=0.5))
        client.setup()
        x = _x(mlp, seed=idx)
        y, record = client.offload_infer(x)
        verdict = client.verify_async(record, og.select_verification(record, 0.5, idx))
        results[idx] = (y, verdict.passed)
        session.close()

    threads = [threading.Thread(target=run, args=(i,)) for i in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(results) == 6 and all(passed for _, passed in results.values())
    for idx, (y, _) in results.items():
        want, _ = og.forward_model(mlp, _x(mlp, seed=idx))
        np.testing.assert_allclose(y, want, rtol=1e-6)


def test_worker_store_dir_keeps_containers(tmp_path, mlp):
    core = WorkerCore(store_dir=str(tmp_path))
    session = DirectSession(core)
    session.checked_request(SetupModel("full", model_to_bytes(mlp)))
    from offguard.container import load_model

    saved = load_model(tmp_path / "full.model")
    assert len(saved.layers) == len(mlp.layers)

import threading

import numpy as np
import pytest

from drift.audit import check_cos_inbound, check_do_isolation, check_interaction_ciphertexts, tamper
from drift.blocks import Block
from drift.federation import (
    COS,
    Bus,
    CentralServer,
    DeterministicScheduler,
    Federation,
    MessageLog,
    RoutingError,
    UserClient,
    build_routing_table,
    do_address,
    gradients_for_blocks,
)
from drift.model import EmbeddingStore, GradientBundle, apply_gradients, init_embeddings
from drift.partition import CoverageError
from drift.protocol import (
    KIND_GRADIENT_BUNDLE,
    KIND_INTERACTION,
    KIND_REPR_REPLY,
    KIND_REPR_REQUEST,
    RepresentationRequest,
    decode_bundle,
    decode_reply,
    decode_request,
    encode_bundle,
    encode_request,
    unframe,
)
from drift.ranking_loss import block_gradients
from drift.secure_channel import gen_key


def make_fed(partitions, num_users=4, num_items=None, dim=3, theta=2, reg=0.0, schedule="det", lr=0.1, seed=0):
    num_items = num_items or 1 + max(i for p in partitions for i in p)
    store = init_embeddings(num_users, num_items, dim, seed, lr)
    keys = {k: gen_key(k, rng_seed=seed) for k in range(len(partitions))}
    return Federation(store, partitions, keys, theta, reg, schedule, record=True)


def kinds(fed, receiver=None):
    return [r.kind for r in fed.log.records if receiver is None or r.receiver == receiver]


def step(fed, addr):
    """Deliver exactly one queued message to ``addr`` (deterministic scheduler only)."""
    sender, data = fed.scheduler.inboxes[addr].popleft()
    try:
        fed.actors[addr].handle(sender, data)
    finally:
        fed.bus.done()


class TestRouting:
    def test_overlap_example(self):
        assert build_routing_table([[0, 1], [1, 2]]).entries == {0: [0], 1: [0, 1], 2: [1]}

    def test_single_do(self):
        t = build_routing_table([list(range(6))])
        assert all(v == [0] for v in t.entries.values()) and len(t.entries) == 6

    def test_brute_force_membership(self):
        rng = np.random.default_rng(0)
        parts = [sorted(rng.choice(50, size=int(rng.integers(5, 25)), replace=False).tolist()) for _ in range(5)]
        parts[0] = sorted(set(parts[0]) | set(range(50)) - set().union(*map(set, parts[1:])))
        t = build_routing_table(parts, 50)
        for item in range(50):
            assert t.lookup(item) == [k for k in range(5) if item in parts[k]]

    def test_coverage_error(self):
        with pytest.raises(CoverageError):
            build_routing_table([[0, 1]], num_items=3)

    def test_unknown_item(self):
        with pytest.raises(RoutingError):
            build_routing_table([[0]]).lookup(9)


class TestUserSend:
    def test_two_holders_two_messages(self):
        fed = make_fed([[0, 1], [1, 2]])
        fed.send(0, 1, True)
        frames = [r for r in fed.log.records if r.kind == KIND_INTERACTION]
        assert [r.receiver for r in frames] == ["do:0", "do:1"]
        assert frames[0].payload[-25:-1] != frames[1].payload[-25:-1]

    def test_one_holder_one_message(self):
        fed = make_fed([[0, 1], [1, 2]])
        fed.send(0, 2, False)
        assert kinds(fed) == [KIND_INTERACTION]

    def test_unknown_item_routing_error(self):
        fed = make_fed([[0, 1]])
        with pytest.raises(RoutingError):
            fed.users.send(0, 5, True)


class TestDataOwner:
    def test_no_outbound_until_threshold(self):
        fed = make_fed([[0, 1, 2, 3]], theta=2)
        for item, pos in [(0, False), (1, True), (2, False)]:
            fed.send(0, item, pos)
        assert kinds(fed) == [KIND_INTERACTION] * 3

    def test_threshold_block_triggers_request(self):
        fed = make_fed([[0, 1, 2, 3]], theta=2)
        for u, item, pos in [(0, 0, False), (0, 1, True), (0, 2, False), (1, 3, False), (1, 1, True), (1, 0, False)]:
            fed.send(u, item, pos)
        assert kinds(fed)[-3:] == [KIND_REPR_REQUEST, KIND_REPR_REPLY, KIND_GRADIENT_BUNDLE]

    def test_scripted_theta2_counts(self):
        fed = make_fed([[0, 1, 2, 3]], theta=2, reg=0.0)
        for u, item, pos in [(0, 0, False), (0, 1, True), (0, 2, False), (1, 3, False), (1, 1, True), (1, 0, False)]:
            fed.send(u, item, pos)
        req = decode_request(unframe(fed.log.inbound(COS)[0].payload)[1])
        assert req.user_ids.tolist() == [0, 1]
        assert len(req.item_ids) <= 4 and req.item_ids.tolist() == [0, 1, 3]
        bundle = decode_bundle(unframe(fed.log.inbound(COS)[1].payload)[1])
        assert len(bundle.user_ids) == 2 and len(bundle.item_ids) == 4

    def test_block_without_negatives_is_drained_but_silent(self):
        fed = make_fed([[0, 1, 2, 3]], theta=2)
        # user 0: positive first, so its completed block has no negatives
        for u, item, pos in [(0, 1, True), (0, 2, False), (1, 3, False), (1, 1, True), (1, 0, False)]:
            fed.send(u, item, pos)
        bundle = decode_bundle(unframe(fed.log.inbound(COS)[1].payload)[1])
        assert bundle.user_ids.tolist() == [1]
        assert fed.dos[0].buffer.saved == []

    def test_bundle_matches_direct_block_gradients(self):
        fed = make_fed([[0, 1, 2, 3, 4]], theta=1, reg=0.01, dim=4)
        snapshot = fed.store.copy()
        for item, pos in [(0, False), (4, False), (1, True), (2, True), (3, False)]:
            fed.send(2, item, pos)
        bundle = decode_bundle(unframe(fed.log.inbound(COS)[1].payload)[1])
        U, I = snapshot.user_matrix, snapshot.item_matrix
        expected = block_gradients(2, U[2], [1, 2], I[[1, 2]], [0, 4], I[[0, 4]], 0.01, do_id=0)
        assert np.array_equal(bundle.user_ids, expected.user_ids)
        assert np.array_equal(bundle.item_ids, expected.item_ids)
        assert np.array_equal(bundle.user_grads, expected.user_grads)
        assert np.array_equal(bundle.item_grads, expected.item_grads)

    def test_tampered_message_dropped(self):
        fed = make_fed([[0, 1, 2]], theta=1)
        fed.send(0, 0, False)
        good = fed.log.records[-1].payload
        active_before = [(b.negatives, b.positives) for b in fed.dos[0].buffer.active.values()]
        fed.bus.send("attacker", "do:0", tamper(good, np.random.default_rng(0)))
        fed.quiesce()
        assert fed.dos[0].auth_failures == 1
        assert [(b.negatives, b.positives) for b in fed.dos[0].buffer.active.values()] == active_before
        assert len(fed.log.events_of("auth-failure")) == 1

    def test_frame_for_other_do_rejected(self):
        fed = make_fed([[0, 1], [1, 2]])
        fed.send(0, 0, True)
        frame_for_do0 = fed.log.records[-1].payload
        fed.bus.send("attacker", "do:1", frame_for_do0)
        fed.quiesce()
        assert fed.dos[1].auth_failures == 1 and fed.dos[1].buffer.active == {}

    def test_update_trigger_law(self):
        rng = np.random.default_rng(3)
        fed = make_fed([list(range(10))], num_users=5, theta=3)
        completions = 0
        for _ in range(400):
            u, item, pos = int(rng.integers(5)), int(rng.integers(10)), bool(rng.random() < 0.5)
            active = fed.dos[0].buffer.active.get(u)
            if active is not None and active.positives and not pos:
                completions += 1
            fed.send(u, item, pos)
        assert fed.dos[0].requests_sent == completions // 3
        assert len(fed.dos[0].buffer.saved) == completions % 3

    def test_incomplete_reply_aborts(self):
        fed = make_fed([[0, 1, 2]], num_users=2)
        do = fed.dos[0]
        do.buffer.saved.append(Block(5, [0], [1], True))  # user 5 is not in the store
        do.request_update()
        fed.quiesce()
        assert do.protocol_errors == 1 and do.pending == {}
        assert len(fed.log.events_of("update-aborted")) == 1
        assert kinds(fed, COS) == [KIND_REPR_REQUEST]


class TestCentralServer:
    def _cos(self):
        store = init_embeddings(3, 5, 2, seed=1, learning_rate=0.5)
        bus = Bus(MessageLog())
        cos = CentralServer(store, bus)
        sink = []
        DeterministicScheduler(bus, {COS: cos, "do:0": type("Sink", (), {"handle": lambda s, snd, d: sink.append(d)})()})
        return store, bus, cos, sink

    def test_reply_rows_equal_store(self):
        store, bus, cos, sink = self._cos()
        cos.handle("do:0", encode_request(RepresentationRequest(0, 1, np.array([2]), np.array([0, 4]))))
        rep = decode_reply(unframe(bus.log.records[-1].payload)[1])
        assert rep.ok and rep.snapshot == store.version
        assert np.array_equal(rep.user_rows, store.user_matrix[[2]])
        assert np.array_equal(rep.item_rows, store.item_matrix[[0, 4]])

    def test_empty_request(self):
        store, bus, cos, sink = self._cos()
        cos.handle("do:0", encode_request(RepresentationRequest(0, 1, np.array([], int), np.array([], int))))
        rep = decode_reply(unframe(bus.log.records[-1].payload)[1])
        assert rep.ok and rep.user_rows.shape == (0, 2) and rep.item_rows.shape == (0, 2)

    def test_zero_bundle_no_change(self):
        store, bus, cos, _ = self._cos()
        before = store.copy()
        cos.handle("do:0", encode_bundle(GradientBundle(0, np.array([1]), np.zeros((1, 2)), np.array([3]), np.zeros((1, 2)))))
        assert np.array_equal(store.user_matrix, before.user_matrix)
        assert np.array_equal(store.item_matrix, before.item_matrix)

    def test_two_bundles_sequential(self):
        store, bus, cos, _ = self._cos()
        oracle = store.copy()
        rng = np.random.default_rng(0)
        b1 = GradientBundle(0, np.array([0, 1]), rng.normal(size=(2, 2)), np.array([2]), rng.normal(size=(1, 2)))
        b2 = GradientBundle(1, np.array([1]), rng.normal(size=(1, 2)), np.array([2, 2]), rng.normal(size=(2, 2)))
        cos.handle("do:0", encode_bundle(b1))
        cos.handle("do:1", encode_bundle(b2))
        apply_gradients(oracle, b1)
        apply_gradients(oracle, b2)
        assert np.array_equal(store.user_matrix, oracle.user_matrix)
        assert np.array_equal(store.item_matrix, oracle.item_matrix)

    @pytest.mark.parametrize(
        "bundle",
        [
            GradientBundle(0, np.array([9]), np.ones((1, 2)), np.array([], int), np.zeros((0, 2))),
            GradientBundle(0, np.array([0]), np.ones((1, 3)), np.array([], int), np.zeros((0, 3))),
            GradientBundle(0, np.array([0]), np.full((1, 2), np.nan), np.array([], int), np.zeros((0, 2))),
        ],
        ids=["out-of-range", "wrong-dim", "nan"],
    )
    def test_malformed_bundle_dropped(self, bundle):
        store, bus, cos, _ = self._cos()
        before = store.copy()
        cos.handle("do:0", encode_bundle(bundle))
        assert cos.protocol_errors == 1 and cos.bundles_applied == 0
        assert np.array_equal(store.user_matrix, before.user_matrix)

    def test_out_of_range_request_gets_error_reply(self):
        store, bus, cos, sink = self._cos()
        cos.handle("do:0", encode_request(RepresentationRequest(0, 1, np.array([7]), np.array([0]))))
        rep = decode_reply(unframe(bus.log.records[-1].payload)[1])
        assert not rep.ok and cos.protocol_errors == 1


class TestAsynchrony:
    def test_stale_gradient_still_applied(self):
        fed = make_fed([[0, 1, 2, 3], [0, 1, 2, 3]], num_users=3, theta=1, reg=0.01)
        do0 = fed.dos[0]
        do0.buffer.saved.append(Block(0, [0], [1], True))
        do0.request_update()
        step(fed, COS)  # COS replies from the current snapshot
        snapshot = fed.store.copy()
        rng = np.random.default_rng(1)
        other = GradientBundle(1, np.array([0]), rng.normal(size=(1, 3)), np.array([1, 0]), rng.normal(size=(2, 3)))
        fed.bus.send("do:1", COS, encode_bundle(other))
        step(fed, COS)  # the store moves on before DO 0 answers
        step(fed, "do:0")
        step(fed, COS)
        assert fed.cos.bundles_applied == 2
        stale, _ = gradients_for_blocks(
            [Block(0, [0], [1], True)], np.array([0]), snapshot.user_matrix[[0]],
            np.array([0, 1]), snapshot.item_matrix[[0, 1]], 0.01, 0,
        )
        apply_gradients(snapshot, other)
        apply_gradients(snapshot, stale)
        assert np.array_equal(fed.store.user_matrix, snapshot.user_matrix)
        assert np.array_equal(fed.store.item_matrix, snapshot.item_matrix)

    def test_reads_never_see_half_an_update(self):
        n_users, n_items, d = 50, 80, 4
        store = EmbeddingStore(np.zeros((n_users, d)), np.zeros((n_items, d)), 0.5)
        bump = GradientBundle(0, np.arange(n_users), -np.ones((n_users, d)), np.arange(n_items), -np.ones((n_items, d)))
        stop = threading.Event()
        torn = []

        def writer():
            while not stop.is_set():
                apply_gradients(store, bump)

        t = threading.Thread(target=writer)
        t.start()
        try:
            for _ in range(2000):
                U, I, version = store.read_rows(np.arange(n_users), np.arange(n_items))
                expected = 0.5 * version
                if not (np.all(U == expected) and np.all(I == expected)):
                    torn.append(version)
        finally:
            stop.set()
            t.join()
        assert torn == []

    def test_threaded_schedule_completes(self):
        rng = np.random.default_rng(2)
        parts = [list(range(0, 12)), list(range(6, 20)), list(range(15, 20)) + [0]]
        fed = make_fed(parts, num_users=6, theta=2, schedule="threads:2")
        with fed:
            for _ in range(600):
                fed.send(int(rng.integers(6)), int(rng.integers(20)), bool(rng.random() < 0.5))
            fed.quiesce()
            assert fed.bus.outstanding == 0
            assert fed.cos.bundles_applied == sum(do.requests_sent for do in fed.dos)
            assert fed.store.is_finite()
            assert check_do_isolation(fed.log, parts) == []


class TestAudits:
    def test_clean_run_passes_all_checks(self):
        rng = np.random.default_rng(4)
        parts = [[0, 1, 2, 3, 4], [3, 4, 5, 6, 7], [7, 8, 9, 0]]
        fed = make_fed(parts, num_users=5, theta=2)
        for _ in range(300):
            fed.send(int(rng.integers(5)), int(rng.integers(10)), bool(rng.random() < 0.6))
        assert check_cos_inbound(fed.log) == []
        assert check_interaction_ciphertexts(fed.log) == []
        assert check_do_isolation(fed.log, parts) == []

    def test_cos_check_flags_interaction_frame(self):
        fed = make_fed([[0, 1]])
        fed.send(0, 0, True)
        fed.log.append(do_address(0), COS, fed.log.records[0].payload)
        assert len(check_cos_inbound(fed.log)) == 1

    def test_isolation_check_flags_foreign_item(self):
        log = MessageLog()
        log.event("do:0", "decrypted", 1, 7)
        assert check_do_isolation(log, [[0, 1]]) != []

    def test_user_client_needs_all_keys(self):
        table = build_routing_table([[0], [1]])
        with pytest.raises(KeyError):
            UserClient(table, {0: gen_key(0, rng_seed=0)}, Bus()).send(0, 1, True)

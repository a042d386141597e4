import hashlib
from dataclasses import replace

import pytest

from tokoin.accumulator import acc_build
from tokoin.aco import (
    AccessController,
    AcoConfig,
    AcoError,
    EvidenceStore,
    SmartLock,
    bundle_bytes,
    make_evidence,
    submit_with_retry,
    verify_evidence,
)
from tokoin.client import Participant
from tokoin.model import Tokoin, VerdictOutcome
from tokoin.trajectory import background, default_region_mask, gen_trajectory
from tokoin.vision import StandardPattern, bitmap_from_doc, frame_diff, mask_ref

from conftest import keypair_for, make_policy

WINDOW = (14 * 3600, 15 * 3600)  # a 2PM-3PM style slot
CENTER = (38.8997, -77.0486)


@pytest.fixture
def rig(small_group_setup, tmp_path):
    device = Participant(keypair_for(8700))
    couriers = [Participant(keypair_for(8710 + i)) for i in range(2)]
    group, wits = acc_build(small_group_setup, [c.pk for c in couriers])
    mask = default_region_mask()
    standard = StandardPattern(background())
    clock_box = {"now": WINDOW[0] + 1800.0}
    controller = AccessController(
        device=device,
        resource_id="front-door",
        standard=standard,
        masks={mask_ref(mask): mask},
        evidence_root=tmp_path / "evidence",
        config=AcoConfig(),
        clock=lambda: clock_box["now"],
    )
    policy = make_policy(
        group,
        start=WINDOW[0],
        end=WINDOW[1],
        lat=CENTER[0],
        lon=CENTER[1],
        region=mask_ref(mask),
        max_duration_s=20.0,
        grace_s=4.0,
    )
    owner = keypair_for(8701).pk
    tokoin = Tokoin(t_id=1, pk_o=owner, pk_h=device.pk, policy=policy)
    return {
        "controller": controller,
        "tokoin": tokoin,
        "couriers": couriers,
        "wits": wits,
        "group": group,
        "mask": mask,
        "clock": clock_box,
        "device": device,
    }


def good_evidence(rig):
    return {
        "clock": {"unix_s": rig["clock"]["now"]},
        "gps": {"lat": CENTER[0], "lon": CENTER[1]},
    }


def begin(rig):
    rig["controller"].begin_session(rig["tokoin"], rig["couriers"][0].pk)
    return rig["controller"]


# --- evidence ------------------------------------------------------------------


def test_evidence_records_sign_and_verify():
    device = Participant(keypair_for(8800))
    record = make_evidence(device.keypair.sk, "gps", {"lat": 1.0, "lon": 2.0}, 123.0)
    assert verify_evidence(device.pk, record) == 1
    tampered = replace(record, payload={"lat": 9.0, "lon": 2.0})
    assert verify_evidence(device.pk, tampered) == 0


def test_evidence_store_digest_matches_persisted_bundle(tmp_path):
    device = Participant(keypair_for(8801))
    store = EvidenceStore(tmp_path)
    records = [
        make_evidence(device.keypair.sk, "clock", {"unix_s": float(i)}, float(i))
        for i in range(4)
    ]
    digest = store.persist(records)
    raw = store.retrieve(digest)
    assert hashlib.sha256(raw).digest() == digest
    assert raw == bundle_bytes(records)


# --- condition verification --------------------------------------------------------


def test_conditions_pass_in_window_at_door(rig):
    controller = begin(rig)
    courier = rig["couriers"][0]
    result = controller.check_conditions(
        rig["tokoin"], good_evidence(rig), courier.pk, rig["wits"][courier.pk]
    )
    assert result.passed


def test_one_second_past_window_fails_on_time(rig):
    controller = begin(rig)
    courier = rig["couriers"][0]
    evidence = good_evidence(rig)
    evidence["clock"] = {"unix_s": WINDOW[1] + 1}
    result = controller.check_conditions(
        rig["tokoin"], evidence, courier.pk, rig["wits"][courier.pk]
    )
    assert not result.passed and result.reasons == ("TIME",)


def test_bogus_witness_fails_on_subject(rig):
    controller = begin(rig)
    outsider = Participant(keypair_for(8802))
    result = controller.check_conditions(
        rig["tokoin"], good_evidence(rig), outsider.pk, rig["wits"][rig["couriers"][0].pk]
    )
    assert not result.passed and "SUBJECT" in result.reasons


def test_stale_witness_after_owner_removed_the_courier(rig, small_group_setup):
    # right time, right place, but the owner shrank the subject group: the
    # courier's old witness no longer closes to the policy's new commitment
    from dataclasses import replace as dc_replace

    from tokoin.accumulator import acc_del_member

    evicted = rig["couriers"][1]
    shrunk = acc_del_member(rig["group"], evicted.pk)
    new_policy = dc_replace(
        rig["tokoin"].policy,
        who=dc_replace(rig["tokoin"].policy.who, value=shrunk.value),
    )
    updated = rig["tokoin"].with_policy(new_policy)
    controller = rig["controller"]
    controller.begin_session(updated, evicted.pk)
    result = controller.check_conditions(
        updated, good_evidence(rig), evicted.pk, rig["wits"][evicted.pk]
    )
    assert not result.passed and result.reasons == ("SUBJECT",)


def test_missing_gps_reading_fails_closed(rig):
    controller = begin(rig)
    courier = rig["couriers"][0]
    evidence = {"clock": {"unix_s": rig["clock"]["now"]}}
    result = controller.check_conditions(
        rig["tokoin"], evidence, courier.pk, rig["wits"][courier.pk]
    )
    assert not result.passed and result.reasons == ("EVIDENCE_MISSING",)


# --- actuation ------------------------------------------------------------------------


def test_lock_sequence_in_order(rig):
    controller = begin(rig)
    courier = rig["couriers"][0]
    controller.check_conditions(rig["tokoin"], good_evidence(rig), courier.pk,
                                rig["wits"][courier.pk])
    assert controller.actuate("unlock") and controller.lock.state == "unlocked"
    assert controller.actuate("drop") and controller.lock.state == "unlocked"
    assert controller.actuate("lock") and controller.lock.state == "locked"


def test_drop_before_unlock_refused(rig):
    controller = begin(rig)
    courier = rig["couriers"][0]
    controller.check_conditions(rig["tokoin"], good_evidence(rig), courier.pk,
                                rig["wits"][courier.pk])
    assert not controller.actuate("drop")
    assert controller.lock.state == "locked"


def test_unlock_unreachable_before_conditions_pass(rig):
    controller = begin(rig)
    assert not controller.actuate("unlock")
    assert controller.lock.state == "locked"
    # even after an explicit failed check
    evidence = good_evidence(rig)
    evidence["clock"] = {"unix_s": WINDOW[1] + 100}
    courier = rig["couriers"][0]
    result = controller.check_conditions(rig["tokoin"], evidence, courier.pk,
                                         rig["wits"][courier.pk])
    assert not result.passed
    assert not controller.actuate("unlock")
    assert controller.lock.state == "locked"


def test_exhaustive_orderings_never_unlock_without_pass(rig):
    # adversarial call orderings against a failing-conditions session: the
    # lock must stay shut whatever sequence of actuations is attempted
    import itertools

    courier = rig["couriers"][0]
    for ordering in itertools.permutations(["unlock", "drop", "lock"]):
        controller = AccessController(
            device=rig["device"],
            resource_id="front-door",
            standard=rig["controller"].standard,
            masks=dict(rig["controller"].masks),
            clock=lambda: WINDOW[1] + 999.0,  # out of window: conditions fail
        )
        controller.begin_session(rig["tokoin"], courier.pk)
        result = controller.check_conditions(
            rig["tokoin"],
            {"clock": {"unix_s": WINDOW[1] + 999.0}, "gps": {"lat": CENTER[0], "lon": CENTER[1]}},
            courier.pk,
            rig["wits"][courier.pk],
        )
        assert not result.passed
        for action in ordering:
            controller.actuate(action)
            assert controller.lock.state == "locked"


def test_single_session_per_lock(rig):
    controller = begin(rig)
    with pytest.raises(AcoError):
        controller.begin_session(rig["tokoin"], rig["couriers"][1].pk)


# --- monitoring -----------------------------------------------------------------------


def run_monitor(rig, label, seed=1):
    controller = begin(rig)
    courier = rig["couriers"][0]
    controller.check_conditions(rig["tokoin"], good_evidence(rig), courier.pk,
                                rig["wits"][courier.pk])
    controller.actuate("unlock")
    trace = gen_trajectory(label, seed=seed, max_duration_s=20.0, grace_s=4.0)
    verdict = controller.monitor_procedure(
        rig["tokoin"], trace.frames, rig["mask"],
        start_time=rig["clock"]["now"],
        action_marks={trace.drop_frame: "drop"},
    )
    return controller, trace, verdict


def test_benign_trace_succeeds(rig):
    controller, _trace, verdict = run_monitor(rig, "benign")
    assert verdict.outcome is VerdictOutcome.SUCCESS
    assert verdict.violation_pattern is None
    assert controller.lock.state == "locked"


def test_boundary_cross_flags_over_privilege_at_the_right_frame(rig):
    controller, trace, verdict = run_monitor(rig, "boundary-cross")
    assert verdict.outcome is VerdictOutcome.OVER_PRIVILEGED
    pattern = bitmap_from_doc(verdict.violation_pattern)
    assert (pattern & ~rig["mask"]).any()  # a 1 outside the permitted area
    detected = [
        r.payload["frame"]
        for r in controller_records(controller, rig)
        if r.payload.get("name") == "violation_out_of_region"
    ]
    assert detected and trace.crossing_frame <= detected[0] <= trace.crossing_frame + 2


def controller_records(controller, rig):
    # records were persisted at verdict time; re-read them from the last bundle
    import json

    digests = sorted((controller.store.root).glob("*.evidence"))
    assert digests
    raw = digests[-1].read_bytes()
    from tokoin.aco import EvidenceRecord

    out = []
    for line in raw.split(b"\n"):
        doc = json.loads(line)
        out.append(EvidenceRecord(kind=doc["kind"], payload=doc["payload"],
                                  sample_time=doc["sample_time"],
                                  sig=bytes.fromhex(doc["sig"])))
    return out


def test_loitering_past_budget_is_overtime(rig):
    controller, _trace, verdict = run_monitor(rig, "overtime")
    assert verdict.outcome is VerdictOutcome.OVERTIME
    names = [r.payload.get("name") for r in controller_records(controller, rig)]
    assert "alarm_bell" in names and "police_call" in names


def test_truncated_stream_is_sensor_lost(rig):
    controller = begin(rig)
    courier = rig["couriers"][0]
    controller.check_conditions(rig["tokoin"], good_evidence(rig), courier.pk,
                                rig["wits"][courier.pk])
    controller.actuate("unlock")
    trace = gen_trajectory("benign", seed=2)
    verdict = controller.monitor_procedure(
        rig["tokoin"], trace.frames[:4], rig["mask"],
        start_time=rig["clock"]["now"],
        action_marks={},
    )
    assert verdict.outcome is VerdictOutcome.CONDITION_FAIL
    assert verdict.reasons == ("SENSOR_LOST",)


def test_accumulated_pattern_is_monotone_per_frame(rig):
    base = background()
    trace = gen_trajectory("benign", seed=3)
    acc = None
    from tokoin.vision import accumulate

    for frame in trace.frames:
        live = frame_diff(base, frame)
        new = accumulate(acc, live)
        if acc is not None:
            assert (new | acc == new).all()
        acc = new


def test_evidence_bundle_verifies_and_digest_matches(rig):
    controller, _trace, verdict = run_monitor(rig, "benign")
    raw = controller.store.retrieve(verdict.evidence_digest)
    assert hashlib.sha256(raw).digest() == verdict.evidence_digest
    records = controller_records(controller, rig)
    assert all(verify_evidence(rig["device"].pk, r) == 1 for r in records)


def test_finalize_builds_signed_message(rig):
    controller, _trace, verdict = run_monitor(rig, "benign")
    msg, records = controller.finalize(rig["tokoin"], verdict)
    from tokoin.model import verify_message

    assert verify_message(msg) == 1
    assert msg.verdict.outcome is VerdictOutcome.SUCCESS
    assert controller.session is None  # session closed


def test_submit_retry_gives_up_at_deadline():
    calls = {"n": 0}
    clock = {"now": 0.0}

    def failing_submit(doc):
        calls["n"] += 1
        raise ConnectionError("chain unreachable")

    ok = submit_with_retry(
        failing_submit, {"x": 1}, deadline_s=10.0,
        now=lambda: clock["now"], sleep=lambda s: clock.__setitem__("now", clock["now"] + s),
    )
    assert not ok and calls["n"] >= 3


def test_submit_retry_succeeds_after_transient_failures():
    calls = {"n": 0}
    clock = {"now": 0.0}

    def flaky_submit(doc):
        calls["n"] += 1
        if calls["n"] < 3:
            raise ConnectionError
        return {"ok": True}

    ok = submit_with_retry(
        flaky_submit, {"x": 1}, deadline_s=100.0,
        now=lambda: clock["now"], sleep=lambda s: clock.__setitem__("now", clock["now"] + s),
    )
    assert ok and calls["n"] == 3


def test_smart_lock_transitions():
    lock = SmartLock()
    assert not lock.apply("drop", 0.0)  # drop needs an open door
    assert lock.apply("unlock", 1.0) and lock.state == "unlocked"
    assert not lock.apply("unlock", 2.0)
    assert lock.apply("drop", 3.0) and lock.state == "unlocked"
    assert lock.apply("lock", 4.0) and lock.state == "locked"

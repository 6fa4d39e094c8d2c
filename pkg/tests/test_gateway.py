from __future__ import annotations

import json
import random

import pytest

from apt_pipeline.clocks import VirtualClock, WallClock
from apt_pipeline.errors import AuthError, Exhausted, ScriptGap
from apt_pipeline.gateway import (
    GatewayTelemetry,
    RateLimitPolicy,
    ReplayProvider,
    ScriptEntry,
    VlmGateway,
    request_to_wire,
    scripted_provider,
)
from apt_pipeline.prompting import PromptSet, assemble_request

from conftest import mem_manifest


def _requests(manifest, n, prefix="req"):
    images = [img for a in manifest.animals for img in manifest.images_for(a.animal_id)]
    assert len(images) >= n
    return [
        assemble_request("SYS", PromptSet(), [images[i]], f"{prefix}-{i}") for i in range(n)
    ]


@pytest.fixture
def manifest():
    return mem_manifest({"a": ("Lurcher", 30, "test"), "b": ("Wild", 30, "test")})


def _echo_entry(text="IMAGE: x\nCLASSIFICATION: Lurcher\nEXPLANATION: ok.", **kw):
    return ScriptEntry(respond=text, **kw)


def test_policy_validation():
    with pytest.raises(ValueError):
        RateLimitPolicy(max_requests_per_window=0)
    with pytest.raises(ValueError):
        RateLimitPolicy(window_s=0)


class TestDispatchRetries:
    def test_fail_twice_then_succeed(self, manifest):
        clock = VirtualClock()
        provider = scripted_provider(
            [ScriptEntry(fail="throttle"), ScriptEntry(fail="timeout"), _echo_entry("OK")],
            clock,
        )
        gateway = VlmGateway(
            provider, RateLimitPolicy(retry_max=3, backoff_base_s=2.0), clock
        )
        response = gateway.dispatch(_requests(manifest, 1)[0])
        assert response.attempt_count == 3
        assert response.raw_text == "OK"
        # two backoffs happened on the virtual clock
        assert clock.now() >= 2.0 + 4.0

    def test_exhausted_after_retry_max(self, manifest):
        clock = VirtualClock()
        provider = scripted_provider([ScriptEntry(fail="throttle")] * 10, clock)
        gateway = VlmGateway(provider, RateLimitPolicy(retry_max=2), clock)
        with pytest.raises(Exhausted) as exc_info:
            gateway.dispatch(_requests(manifest, 1)[0])
        assert exc_info.value.attempt_count == 3
        assert exc_info.value.cause is not None

    def test_auth_error_not_retried(self, manifest):
        clock = VirtualClock()
        provider = scripted_provider([ScriptEntry(fail="auth"), _echo_entry()], clock)
        telemetry = GatewayTelemetry()
        gateway = VlmGateway(provider, RateLimitPolicy(retry_max=5), clock, telemetry)
        with pytest.raises(AuthError):
            gateway.dispatch(_requests(manifest, 1)[0])
        assert len(telemetry.traces[0].attempt_starts) == 1

    def test_oversized_payload_not_retried(self, manifest):
        from apt_pipeline.errors import PayloadTooLarge

        clock = VirtualClock()
        provider = scripted_provider(
            [ScriptEntry(fail="payload_too_large"), _echo_entry()], clock
        )
        telemetry = GatewayTelemetry()
        gateway = VlmGateway(provider, RateLimitPolicy(retry_max=5), clock, telemetry)
        with pytest.raises(PayloadTooLarge):
            gateway.dispatch(_requests(manifest, 1)[0])
        assert len(telemetry.traces[0].attempt_starts) == 1

    def test_script_gap_when_script_runs_out(self, manifest):
        clock = VirtualClock()
        provider = scripted_provider([_echo_entry("one")], clock)
        gateway = VlmGateway(provider, clock=clock)
        requests = _requests(manifest, 2)
        assert gateway.dispatch(requests[0]).raw_text == "one"
        with pytest.raises(ScriptGap):
            gateway.dispatch(requests[1])


class TestDispatchBatch:
    def test_ten_requests_span_at_least_three_windows(self, manifest):
        # virtual-clock oracle: 3 starts per 60s window forces >= 180s span
        clock = VirtualClock()
        telemetry = GatewayTelemetry()
        provider = ReplayProvider(
            {img.image_id: "Lurcher" for img in manifest.images}
        )
        policy = RateLimitPolicy(max_requests_per_window=3, window_s=60.0, max_concurrent=2)
        gateway = VlmGateway(provider, policy, clock, telemetry)
        responses = gateway.dispatch_batch(_requests(manifest, 10))
        assert all(not isinstance(r, Exception) for r in responses)
        starts = telemetry.start_times()
        assert len(starts) == 10
        assert starts[-1] - starts[0] >= 180.0

    def test_single_request(self, manifest):
        clock = VirtualClock()
        provider = ReplayProvider({img.image_id: "Wild" for img in manifest.images})
        gateway = VlmGateway(provider, clock=clock)
        (response,) = gateway.dispatch_batch(_requests(manifest, 1))
        assert response.request_id == "req-0"

    def test_failures_surface_per_request_in_order(self, manifest):
        clock = VirtualClock()
        requests = _requests(manifest, 5)
        bad_id = requests[3].request_id

        def is_bad(request):
            return request.request_id == bad_id

        script = [ScriptEntry(fail="throttle", match=is_bad)] * 10 + [
            _echo_entry(f"ok-{i}") for i in range(4)
        ]
        provider = scripted_provider(script, clock)
        policy = RateLimitPolicy(
            max_requests_per_window=100, window_s=1.0, retry_max=2, backoff_base_s=0.1
        )
        gateway = VlmGateway(provider, policy, clock)
        results = gateway.dispatch_batch(requests)
        assert isinstance(results[3], Exhausted)
        assert [isinstance(r, Exhausted) for r in results] == [
            False, False, False, True, False,
        ]

    def test_response_order_matches_request_order_with_random_delays(self, manifest):
        rng = random.Random(17)
        clock = VirtualClock()
        script = [
            ScriptEntry(respond=f"resp-{i}", latency_s=rng.uniform(0, 5), match=(
                lambda i=i: lambda r: r.request_id == f"req-{i}"
            )())
            for i in range(8)
        ]
        provider = scripted_provider(script, clock)
        policy = RateLimitPolicy(max_requests_per_window=100, window_s=1.0, max_concurrent=3)
        gateway = VlmGateway(provider, policy, clock)
        results = gateway.dispatch_batch(_requests(manifest, 8))
        assert [r.raw_text for r in results] == [f"resp-{i}" for i in range(8)]
        assert [r.request_id for r in results] == [f"req-{i}" for i in range(8)]

    def test_in_flight_never_exceeds_max_concurrent(self, manifest):
        clock = VirtualClock()
        telemetry = GatewayTelemetry()
        script = [
            ScriptEntry(respond="ok", latency_s=3.0, match=None) for _ in range(9)
        ]
        provider = scripted_provider(script, clock)
        policy = RateLimitPolicy(max_requests_per_window=100, window_s=1.0, max_concurrent=2)
        gateway = VlmGateway(provider, policy, clock, telemetry)
        gateway.dispatch_batch(_requests(manifest, 9))
        intervals = telemetry.intervals()
        assert len(intervals) == 9
        for t, _ in intervals:
            overlapping = sum(1 for s, e in intervals if s <= t < e)
            assert overlapping <= 2


class TestScriptedProvider:
    def test_verbatim_echo(self, manifest):
        clock = VirtualClock()
        provider = scripted_provider([_echo_entry("CLASSIFICATION: Lurcher ...")], clock)
        gateway = VlmGateway(provider, clock=clock)
        response = gateway.dispatch(_requests(manifest, 1)[0])
        assert response.raw_text == "CLASSIFICATION: Lurcher ..."

    def test_gap_on_unmatched_second_request(self, manifest):
        provider = scripted_provider([_echo_entry("only")])
        requests = _requests(manifest, 2)
        assert provider.complete(requests[0]) == "only"
        with pytest.raises(ScriptGap):
            provider.complete(requests[1])

    def test_predicate_routes_by_image_id(self, manifest):
        requests = _requests(manifest, 4)

        def for_id(image_id):
            return lambda request: image_id in request.query_ids()

        script = []
        for request in requests:
            image_id = request.query_ids()[0]
            label = "Lurcher" if image_id.startswith("a") else "Wild"
            script.append(
                ScriptEntry(
                    respond=f"IMAGE: {image_id}\nCLASSIFICATION: {label}\nEXPLANATION: x.",
                    match=for_id(image_id),
                )
            )
        provider = scripted_provider(list(reversed(script)))
        for request in requests:
            image_id = request.query_ids()[0]
            assert image_id in provider.complete(request)


class TestRateLimitProperties:
    @pytest.mark.parametrize("trial", range(10))
    def test_sliding_window_property_randomized(self, manifest, trial):
        rng = random.Random(1000 + trial)
        n = rng.randint(2, 14)
        policy = RateLimitPolicy(
            max_requests_per_window=rng.randint(1, 4),
            window_s=rng.choice([5.0, 30.0, 60.0]),
            max_concurrent=rng.randint(1, 3),
            retry_max=1,
            backoff_base_s=0.5,
        )
        clock = VirtualClock()
        telemetry = GatewayTelemetry()
        script = [
            ScriptEntry(respond="ok", latency_s=rng.uniform(0, policy.window_s))
            for _ in range(n)
        ]
        provider = scripted_provider(script, clock)
        gateway = VlmGateway(provider, policy, clock, telemetry, jitter_seed=trial)
        results = gateway.dispatch_batch(_requests(manifest, n))
        starts = telemetry.start_times()
        assert len(starts) == n
        for i, t in enumerate(starts):
            in_window = sum(1 for s in starts if t <= s < t + policy.window_s)
            assert in_window <= policy.max_requests_per_window
        assert [r.request_id for r in results] == [f"req-{i}" for i in range(n)]


def test_wire_shape_and_no_credentials(tmp_path, monkeypatch):
    from conftest import write_dataset
    from apt_pipeline.dataset import load_manifest

    monkeypatch.setenv("VLM_API_KEY", "sekret-sentinel")
    path = write_dataset(tmp_path, {"a": ("Lurcher", 2, "prompt"), "b": ("Wild", 1, "test")})
    manifest = load_manifest(path)
    images = manifest.images_for("b")
    request = assemble_request("SYS", PromptSet(), list(images), "w1")
    wire = request_to_wire(request, "model-x")
    assert wire["model"] == "model-x"
    assert wire["messages"][0] == {"role": "system", "content": "SYS"}
    parts = wire["messages"][1]["content"]
    assert [p["type"] for p in parts] == ["image", "text"]
    blob = json.dumps(wire)
    assert "sekret-sentinel" not in blob
    assert "ground_truth" not in blob


def test_wall_clock_interface():
    clock = WallClock()
    before = clock.now()
    clock.sleep(0.01)
    assert clock.now() >= before
    clock.register_worker()
    clock.unregister_worker()


def test_no_credential_bytes_in_run_artifacts(tmp_path, monkeypatch, caplog):
    # scan test: the credential never reaches wire bodies, files, or logs
    import logging

    from apt_pipeline.replay import run_replay

    sentinel = "sekret-bytes-9000"
    monkeypatch.setenv("VLM_API_KEY", sentinel)
    with caplog.at_level(logging.DEBUG):
        result = run_replay(tmp_path, capture_wire=True)
    for trace in result.telemetry.traces:
        assert sentinel not in json.dumps(trace.wire_body)
    for path in tmp_path.rglob("*.json*"):
        assert sentinel not in path.read_text(encoding="utf-8"), path
    assert sentinel not in caplog.text

"""Benchmark harness: per-phase latency, flow bandwidth, store sizes.

Latencies are monotonic-clock averages over a declared run count, each phase
measured in isolation. Bandwidth is counted from the actual bytes written to
and read from a loopback instance of the reference server, split into header
and payload. Storage numbers come straight from the wire encodings, so they
are deterministic across runs.
"""

from __future__ import annotations

import json
import os
import tempfile
import time
from dataclasses import dataclass

from . import curve, encoding, httpwire
from .agent import Agent, AgentStore, SessionRecord
from .encoding import WireMode
from .errors import BenchEnvironmentError
from .keyhier import DerivationPath, derive_child_pub
from .server import VcrHttpServer, VcrServer
from .signer import ConfirmationPolicy, SignerState
from .vcr import ActionKind, ReplayCache, VcrAction, build_vcr, sign_vcr, verify_vcr
from .wrapper import (
    ClientId,
    MultiSigPolicy,
    WrapperRequest,
    check_wrapper_echo,
    fresh_cookie_value,
    issue_wrapper,
    verify_wrapper,
)

SCHEMA_VERSION = 1
DEFAULT_RUNS = 10

LATENCY_PHASES = (
    "key_derivation",
    "wrapper_generation",
    "wrapper_verification",
    "wrapper_storage",
    "history_matching",
    "history_update",
    "vcr_generation",
    "vcr_verification",
)


@dataclass
class FlowBandwidth:
    request_header: int
    request_payload: int
    response_header: int
    response_payload: int

    @property
    def total(self) -> int:
        return (
            self.request_header
            + self.request_payload
            + self.response_header
            + self.response_payload
        )

    def to_dict(self) -> dict:
        return {
            "request_header_bytes": self.request_header,
            "request_payload_bytes": self.request_payload,
            "response_header_bytes": self.response_header,
            "response_payload_bytes": self.response_payload,
            "total_bytes": self.total,
        }


@dataclass
class BenchReport:
    runs: int
    latency_ms: dict[str, float]
    bandwidth: dict[str, FlowBandwidth]
    storage_bytes: dict[str, int]
    schema: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "runs": self.runs,
            "latency_ms": {k: round(v, 4) for k, v in self.latency_ms.items()},
            "bandwidth": {k: v.to_dict() for k, v in self.bandwidth.items()},
            "storage_bytes": dict(self.storage_bytes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def format_table(self) -> str:
        lines = [f"latency (avg over {self.runs} runs)"]
        for phase in LATENCY_PHASES:
            lines.append(f"  {phase:<22} {self.latency_ms[phase]:>9.3f} ms")
        lines.append("bandwidth (header + payload)")
        for flow, bw in self.bandwidth.items():
            lines.append(
                f"  {flow:<22} request {bw.request_header + bw.request_payload:>5} B"
                f"  response {bw.response_header + bw.response_payload:>5} B"
                f"  total {bw.total / 1000:.2f} kB"
            )
        lines.append("storage")
        for name, size in self.storage_bytes.items():
            lines.append(f"  {name:<34} {size:>6} B")
        return "\n".join(lines)


def _average(fn, runs: int) -> float:
    total = 0.0
    for _ in range(runs):
        start = time.perf_counter()
        fn()
        total += time.perf_counter() - start
    return total / runs * 1000.0


def run_bench(runs: int = DEFAULT_RUNS, seed: bytes | None = None) -> BenchReport:
    if runs < 1:
        raise BenchEnvironmentError("runs must be >= 1")
    workdir = tempfile.mkdtemp(prefix="vcrkit-bench-")
    signer = SignerState.init(
        "bench",
        seed or os.urandom(32),
        os.path.join(workdir, "signer.state"),
        policy=ConfirmationPolicy.AUTO_APPROVE,
    )
    device_xpub = signer.issue_device_xpub(0)

    vcr_server = VcrServer()
    try:
        httpd = VcrHttpServer(("127.0.0.1", 0), vcr_server)
    except OSError as exc:
        raise BenchEnvironmentError(f"cannot bind loopback server: {exc}") from None
    httpd.serve_in_thread()

    try:
        return _run_phases(runs, workdir, device_xpub, signer, vcr_server, httpd)
    finally:
        httpd.close()


def _run_phases(runs, workdir, device_xpub, signer, vcr_server, httpd) -> BenchReport:
    now = int(time.time())
    origin = httpd.origin
    store_path = os.path.join(workdir, "agent.store")
    store = AgentStore()
    store.provision_device(device_xpub, 0)
    agent = Agent(store, store_path=store_path)

    session, _ = agent.visit(origin + "/", now)
    if session is None:
        raise BenchEnvironmentError("loopback server did not advertise endpoints")

    latency: dict[str, float] = {}

    curve.scalar_base_mult(2)  # warm the comb table outside any timing

    counter = [1000]

    def derive_phase():
        counter[0] += 1
        derive_child_pub(device_xpub, counter[0])

    latency["key_derivation"] = _average(derive_phase, runs)

    cookie = ClientId("vcid", fresh_cookie_value())
    policy = MultiSigPolicy((derive_child_pub(device_xpub, 999).public_point,))
    latency["wrapper_generation"] = _average(
        lambda: issue_wrapper(vcr_server.server_key, cookie, policy, now), runs
    )

    fixture_wrapper = issue_wrapper(vcr_server.server_key, cookie, policy, now)

    def verify_phase():
        verify_wrapper(vcr_server.server_key.public_point, fixture_wrapper)
        check_wrapper_echo(policy, cookie, fixture_wrapper)

    latency["wrapper_verification"] = _average(verify_phase, runs)

    storage_counter = [5000]

    def storage_phase():
        storage_counter[0] += 1
        j = storage_counter[0]
        record = SessionRecord(
            server_origin=origin,
            endpoints=vcr_server.advertisement,
            client_id=ClientId("vcid", fresh_cookie_value()),
            path=DerivationPath((0, j)),
            wrapper=issue_wrapper(
                vcr_server.server_key,
                cookie,
                MultiSigPolicy((derive_child_pub(device_xpub, j).public_point,)),
                now,
            ),
            created_at=now,
        )
        start = time.perf_counter()
        agent.store.add_session(record)
        agent.save()
        return time.perf_counter() - start

    total = 0.0
    for _ in range(runs):
        total += storage_phase()
    latency["wrapper_storage"] = total / runs * 1000.0

    cid = session.client_id
    latency["history_matching"] = _average(
        lambda: agent.store.find_by_cookie(cid.cookie_name, cid.cookie_value), runs
    )

    def history_phase():
        agent.store.record_visit(
            [(cid.cookie_name, cid.cookie_value)], origin + "/page", now
        )
        agent.save()

    latency["history_update"] = _average(history_phase, runs)

    sign_path = session.path

    def vcr_generation_phase():
        request = build_vcr([session.wrapper], VcrAction(ActionKind.ACCESS), now)
        sign_vcr(request, signer, sign_path)

    latency["vcr_generation"] = _average(vcr_generation_phase, runs)

    signed = sign_vcr(
        build_vcr([session.wrapper], VcrAction(ActionKind.ACCESS), now),
        signer,
        sign_path,
    )
    # Fresh cache per run so the replay guard never rejects the probe.
    latency["vcr_verification"] = _average(
        lambda: verify_vcr(
            vcr_server.server_key.public_point, signed, now, ReplayCache(300)
        ),
        runs,
    )

    bandwidth = _measure_bandwidth(origin, vcr_server, agent, signer, now)
    storage_bytes = _measure_storage(session)

    return BenchReport(
        runs=runs,
        latency_ms=latency,
        bandwidth=bandwidth,
        storage_bytes=storage_bytes,
    )


def _measure_bandwidth(origin, vcr_server, agent, signer, now) -> dict[str, FlowBandwidth]:
    # Wrapper flow: one page GET to obtain a cookie, then the measured POST.
    page = httpwire.request("GET", origin + "/bench-flow")
    cookie_raw = page.set_cookies[0].split(";", 1)[0]
    name, _, value = cookie_raw.partition("=")
    client_id = ClientId(name, value)
    key_point = derive_child_pub(agent.store.require_provisioned(), 31111).public_point
    body = encoding.to_wire(
        WrapperRequest(client_id=client_id, vcr_pubkeys=(key_point,)),
        WireMode.OPTIMIZED,
    ).encode()
    wrapper_exchange = httpwire.request(
        "POST",
        origin + vcr_server.advertisement.wrapper_endpoint,
        headers={
            "Content-Type": "application/json",
            "Cookie": f"{name}={value}",
        },
        body=body,
    )
    if wrapper_exchange.status != 200:
        raise BenchEnvironmentError("wrapper flow failed during bandwidth run")

    from .wrapper import Wrapper

    wrapper = encoding.from_wire(
        Wrapper, wrapper_exchange.body.decode(), WireMode.OPTIMIZED
    )
    request = sign_vcr(
        build_vcr([wrapper], VcrAction(ActionKind.ACCESS), now),
        signer,
        DerivationPath((0, 31111)),
    )
    vcr_exchange = httpwire.request(
        "POST",
        origin + vcr_server.advertisement.vcr_endpoint,
        headers={"Content-Type": "application/json"},
        body=encoding.to_wire(request, WireMode.OPTIMIZED).encode(),
    )
    if vcr_exchange.status != 200:
        raise BenchEnvironmentError("vcr flow failed during bandwidth run")

    return {
        "obtain_wrapper": FlowBandwidth(
            request_header=wrapper_exchange.request_header_bytes,
            request_payload=wrapper_exchange.request_body_bytes,
            response_header=wrapper_exchange.response_header_bytes,
            response_payload=wrapper_exchange.response_body_bytes,
        ),
        "verify_vcr": FlowBandwidth(
            request_header=vcr_exchange.request_header_bytes,
            request_payload=vcr_exchange.request_body_bytes,
            response_header=vcr_exchange.response_header_bytes,
            response_payload=vcr_exchange.response_body_bytes,
        ),
    }


def _measure_storage(session: SessionRecord) -> dict[str, int]:
    baseline = SessionRecord(
        server_origin=session.server_origin,
        endpoints=session.endpoints,
        client_id=session.client_id,
        path=session.path,
        wrapper=session.wrapper,
        created_at=session.created_at,
        history=[],
    )
    hundred = SessionRecord(
        server_origin=session.server_origin,
        endpoints=session.endpoints,
        client_id=session.client_id,
        path=session.path,
        wrapper=session.wrapper,
        created_at=session.created_at,
        history=[(session.created_at + i, "/some/page") for i in range(100)],
    )
    return {
        "baseline_optimized": encoding.byte_size(baseline, WireMode.OPTIMIZED),
        "baseline_verbose": encoding.byte_size(baseline, WireMode.VERBOSE),
        "history100_optimized": encoding.byte_size(hundred, WireMode.OPTIMIZED),
        "history100_verbose": encoding.byte_size(hundred, WireMode.VERBOSE),
    }

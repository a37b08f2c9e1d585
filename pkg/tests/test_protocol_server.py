import asyncio
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infershare.cli import main
from infershare.executor import execute_model, generate_weights, random_input, write_tensor_csv
from infershare.manifest import bundled_manifest, serialize_manifest
from infershare.predictor import reference_profiles
from infershare.protocol import (
    MAX_FRAME,
    FrameReader,
    FrameTooLarge,
    Kind,
    MalformedPayload,
    NeedMoreBytes,
    ProtocolError,
    UnknownKind,
    UnsupportedVersion,
    decode_frame,
    encode_frame,
)
from infershare.server import Connection, ControllerServer, RemoteError, WorkerServer, decode_tensor, encode_tensor


# ------------------------------------------------------------------ protocol

def test_golden_empty_upload_frame():
    assert encode_frame(Kind.UPLOAD_MODEL) == b"\x00\x00\x00\x01\x01"


def test_round_trip():
    payload = {"model_id": "t/m", "n": 3, "xs": [1.5, -2.0]}
    frame, used = decode_frame(encode_frame(Kind.INFER, payload))
    assert frame.kind is Kind.INFER
    assert frame.payload == payload
    assert used == len(encode_frame(Kind.INFER, payload))


def test_length_over_limit_rejected_before_body():
    header = (MAX_FRAME + 1).to_bytes(4, "big") + b"\x01"
    with pytest.raises(FrameTooLarge):
        decode_frame(header)


def test_short_buffer_asks_for_more():
    with pytest.raises(NeedMoreBytes) as info:
        decode_frame(b"\x00\x00")
    assert info.value.n == 2
    with pytest.raises(NeedMoreBytes):
        decode_frame(encode_frame(Kind.INFER, {"a": 1})[:-1])


def test_unknown_kind_and_bad_payloads():
    with pytest.raises(UnknownKind):
        decode_frame(b"\x00\x00\x00\x01\x42")
    with pytest.raises(UnknownKind):
        encode_frame(0x42)
    with pytest.raises(MalformedPayload):
        decode_frame(b"\x00\x00\x00\x03\x01[]")
    with pytest.raises(UnsupportedVersion):
        decode_frame(encode_frame(Kind.INFER, {"v": 2}))


def test_reader_reassembles_split_stream():
    frames = [encode_frame(Kind.HEARTBEAT, {"i": i}) for i in range(20)]
    data = b"".join(frames)
    reader = FrameReader()
    got = []
    for i in range(0, len(data), 7):
        got += reader.feed(data[i:i + 7])
    assert [f.payload["i"] for f in got] == list(range(20))


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=64))
def test_fuzz_never_crashes(blob):
    try:
        frame, used = decode_frame(blob)
    except ProtocolError:
        return
    assert 5 <= used <= len(blob)
    assert isinstance(frame.payload, dict)


def test_tensor_codec_round_trip():
    x = random_input(bundled_manifest("cnn_tiny"), 2, seed=3)
    assert decode_tensor(encode_tensor(x)) == x


# -------------------------------------------------------------------- server

class Cluster:
    """A controller and one worker on an event loop in a background thread."""

    def __init__(self):
        self.loop = asyncio.new_event_loop()
        self.thread = threading.Thread(target=self.loop.run_forever, daemon=True)
        self.thread.start()
        self.controller = ControllerServer(demand_window_ms=200.0)
        self.run(self.controller.start("127.0.0.1", 0))
        self.address = self.controller.address
        self.worker = WorkerServer("w1", reference_profiles()["v100"], 10**10,
                                   controller=self.address, heartbeat_ms=50.0)
        self.run(self.worker.start("127.0.0.1", 0))

    def run(self, coro, timeout=30.0):
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(timeout)

    def close(self):
        self.run(self.worker.close())
        self.run(self.controller.close())
        self.loop.call_soon_threadsafe(self.loop.stop)
        self.thread.join(5)


@pytest.fixture(scope="module")
def cluster():
    c = Cluster()
    yield c
    c.close()


async def call(address, kind, payload=None):
    conn = await Connection.open(address)
    try:
        return await conn.call(kind, payload, timeout=30.0)
    finally:
        await conn.close()


async def wait_routable(address, model_id):
    for _ in range(200):
        models = (await call(address, Kind.LIST_MODELS))["models"]
        if models.get(model_id, {}).get("replicas"):
            return
        await asyncio.sleep(0.05)
    raise AssertionError(f"{model_id} never became routable")


def test_server_upload_and_infer_matches_local(cluster):
    m = bundled_manifest("mlp_small")
    res = cluster.run(call(cluster.address, Kind.UPLOAD_MODEL,
                           {"tenant": "t", "manifest": serialize_manifest(m)}))
    mid = res["model_id"]
    cluster.run(wait_routable(cluster.address, mid))
    x = random_input(m, 2, seed=12)
    out = cluster.run(call(cluster.address, Kind.INFER, {"model_id": mid, "tenant": "t", "input": encode_tensor(x)}))
    assert out["worker_id"] == "w1"
    assert np.array_equal(decode_tensor(out["output"]).array, execute_model(m, generate_weights(m), x).array)


def test_server_errors_are_typed(cluster):
    with pytest.raises(RemoteError) as info:
        cluster.run(call(cluster.address, Kind.INFER, {"model_id": "nope", "tenant": "t"}))
    assert info.value.error == "ModelUnavailable"
    with pytest.raises(RemoteError) as info:
        cluster.run(call(cluster.address, Kind.UPLOAD_MODEL, {"tenant": "t", "manifest": "garbage"}))
    assert info.value.error in ("ValidationFailed", "MalformedDocument")


def test_server_survives_a_bad_frame(cluster):
    async def go():
        host, port = cluster.address.rsplit(":", 1)
        reader, writer = await asyncio.open_connection(host, int(port))
        writer.write(b"\x00\x00\x00\x03\x03[]")
        writer.write(encode_frame(Kind.LIST_MODELS, {"id": 7}))
        await writer.drain()
        frames, fr = [], FrameReader()
        while len(frames) < 2:
            frames += fr.feed(await asyncio.wait_for(reader.read(65536), 10))
        writer.close()
        return frames
    first, second = cluster.run(go())
    assert first.kind is Kind.ERROR
    assert second.kind is Kind.OK and second.payload["id"] == 7


def test_cli_against_live_controller(cluster, tmp_path, capsys):
    m = bundled_manifest("cnn_tiny")
    assert main(["upload", "--manifest", "cnn_tiny", "--tenant", "c", "--controller", cluster.address]) == 0
    cluster.run(wait_routable(cluster.address, "c/cnn_tiny"))
    x = random_input(m, 1, seed=4)
    path = tmp_path / "in.csv"
    path.write_text(write_tensor_csv(x))
    capsys.readouterr()
    assert main(["infer", "--model", "c/cnn_tiny", "--input", str(path), "--controller", cluster.address]) == 0
    assert capsys.readouterr().out == write_tensor_csv(execute_model(m, generate_weights(m), x))

    assert main(["infer", "--model", "missing", "--input", str(path), "--controller", cluster.address]) == 1
    assert "ModelUnavailable" in capsys.readouterr().err
    assert main(["stats", "--controller", cluster.address]) == 0
    assert "c/cnn_tiny" in capsys.readouterr().out


# ----------------------------------------------------------------------- cli

def test_cli_invalid_manifest_lists_findings(tmp_path, capsys):
    text = serialize_manifest(bundled_manifest("mlp_small"))
    bad = tmp_path / "bad.manifest"
    bad.write_text(text.replace(f"total_weight_bytes {bundled_manifest('mlp_small').total_weight_bytes}",
                                "total_weight_bytes 1"))
    assert main(["upload", "--manifest", str(bad), "--controller", "127.0.0.1:1"]) == 1
    err = capsys.readouterr().err
    assert "WeightByteMismatch" in err


def test_cli_usage_error_exits_2(capsys):
    assert main(["simulate"]) == 2
    assert main(["nonsense"]) == 2


def test_cli_connection_refused_exits_1(capsys):
    assert main(["stats", "--controller", "127.0.0.1:1"]) == 1
    assert capsys.readouterr().err


def test_cli_simulate_twice_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["simulate", "--scenario", "sporadic", "--seed", "5", "--out", str(out)]) == 0
    assert (a / "report.csv").read_text() == (b / "report.csv").read_text()
    assert (a / "trace.jsonl").read_text() == (b / "trace.jsonl").read_text()
    capsys.readouterr()
    assert main(["report", "--trace", str(a / "trace.jsonl")]) == 0
    assert capsys.readouterr().out == (a / "report.csv").read_text()


def test_cli_exec(tmp_path, capsys):
    m = bundled_manifest("mlp_small")
    x = random_input(m, 3, seed=8)
    (tmp_path / "x.csv").write_text(write_tensor_csv(x))
    assert main(["exec", "--manifest", "mlp_small", "--input", str(tmp_path / "x.csv")]) == 0
    assert capsys.readouterr().out == write_tensor_csv(execute_model(m, generate_weights(m), x))

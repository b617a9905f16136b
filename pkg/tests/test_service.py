import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from futuresight.bpe import Tokenizer
from futuresight.evaluation import realization_score
from futuresight.idf import IdfTable, load_stopwords
from futuresight.model import MEMORY, InferenceModel, ModelConfig, init_params
from futuresight.service import create_app


def build_model(max_seq=128, seed=3):
    cfg = ModelConfig(vocab_size=261, d_model=16, d_enc=16, n_heads=2,
                      n_layers_dec=2, n_layers_enc=1, d_ff=32, max_seq=max_seq,
                      injection_mode=MEMORY, seed=seed)
    store = init_params(cfg, dtype=np.float64)
    return InferenceModel(cfg, store.state_arrays(), Tokenizer(merges=[]))


def make_table():
    return IdfTable(doc_count=8, df={"dragon": 1, "castle": 2},
                    stopwords=load_stopwords())


@pytest.fixture(scope="module")
def client():
    app = create_app(build_model(), idf_table=make_table())
    return TestClient(app)


def new_session(client, **kw):
    body = {"context": "The night was quiet.",
            "future": "A storm broke the silence.", "distance": 2,
            "params": {"seed": 7}}
    body.update(kw)
    r = client.post("/v1/sessions", json=body)
    assert r.status_code == 201, r.text
    return r.json()["id"]


def parse_sse(raw: str):
    events = []
    for block in raw.strip().split("\n\n"):
        lines = block.split("\n")
        assert lines[0].startswith("event: ") and lines[1].startswith("data: ")
        events.append((lines[0][7:], json.loads(lines[1][6:])))
    return events


def sse_generate(client, sid, **body):
    r = client.post(f"/v1/sessions/{sid}/generate", json=body)
    assert r.status_code == 200, r.text
    assert r.headers["content-type"].startswith("text/event-stream")
    return parse_sse(r.text)


# --- happy path ---------------------------------------------------------------

def test_create_and_read_session(client):
    sid = new_session(client)
    r = client.get(f"/v1/sessions/{sid}")
    assert r.status_code == 200
    doc = r.json()
    assert doc["id"] == sid
    assert doc["context"] == "The night was quiet."
    assert doc["generated"] == "" and doc["n_tokens"] == 0 and not doc["done"]
    assert doc["futures"] == [{"text": "A storm broke the silence.",
                               "distance": 2, "token_offset": 0,
                               "char_offset": 0}]


def test_token_stream_and_transcript_agree(client):
    sid = new_session(client)
    events = sse_generate(client, sid, max_new_tokens=16)
    kinds = [k for k, _ in events]
    assert kinds[-1] == "end" and set(kinds[:-1]) == {"token"}
    tokens = [p for k, p in events if k == "token"]
    assert [t["index"] for t in tokens] == list(range(len(tokens)))
    end = events[-1][1]
    assert end["reason"] == "budget" and end["n_tokens"] == 16
    text = "".join(t["piece"] for t in tokens)
    doc = client.get(f"/v1/sessions/{sid}").json()
    assert doc["generated"] == text
    assert doc["n_tokens"] == 16


def test_second_generate_continues_indexing(client):
    sid = new_session(client)
    first = sse_generate(client, sid, max_new_tokens=5)
    second = sse_generate(client, sid, max_new_tokens=4)
    idx = [p["index"] for k, p in second if k == "token"]
    assert idx == [5, 6, 7, 8]
    assert second[-1][1]["total_tokens"] == 9
    assert first[-1][1]["total_tokens"] == 5


def test_swap_future_and_history(client):
    sid = new_session(client)
    sse_generate(client, sid, max_new_tokens=6)
    r = client.put(f"/v1/sessions/{sid}/future",
                   json={"future": "Wolves reached the gate.", "distance": 3})
    assert r.status_code == 200
    body = r.json()
    assert body["ok"] is True and body["recompute_ms"] >= 0
    doc = client.get(f"/v1/sessions/{sid}").json()
    assert len(doc["futures"]) == 2
    rec = doc["futures"][-1]
    assert rec["distance"] == 3 and rec["token_offset"] == 6
    assert rec["char_offset"] == len(doc["generated"])


def test_streams_are_deterministic_per_seed(client):
    a = new_session(client, params={"seed": 3})
    b = new_session(client, params={"seed": 3})
    ta = sse_generate(client, a, max_new_tokens=12)
    tb = sse_generate(client, b, max_new_tokens=12)
    assert [p for k, p in ta if k == "token"] == [p for k, p in tb if k == "token"]


def test_stream_matches_cli_generate(client, tmp_path, capsys):
    # same checkpoint, seed, and params through both front doors: the SSE
    # piece concatenation must equal what the command-line generator prints
    from futuresight import cli
    from futuresight.model import save_checkpoint

    model = build_model()
    ck = tmp_path / "m.fsck"
    save_checkpoint(ck, model.cfg, model.p, meta={"tokenizer": model.tokenizer.to_dict()})
    ctx = tmp_path / "ctx.txt"
    ctx.write_text("The night was quiet.", encoding="utf-8")

    rc = cli.main(["generate", "--ckpt", str(ck), "--context", str(ctx),
                   "--future", "A storm broke the silence.", "--distance", "2",
                   "--tokens", "24", "--seed", "7"])
    assert rc == 0
    cli_text = capsys.readouterr().out
    assert cli_text.endswith("\n")

    sid = new_session(client)  # same context, future, distance, seed
    events = sse_generate(client, sid, max_new_tokens=24)
    streamed = "".join(p["piece"] for k, p in events if k == "token")
    assert streamed == cli_text[:-1]


def test_realization_endpoint_matches_library(client):
    payload = {"text": "The dragon came to the castle.",
               "future": "The dragon burned the castle."}
    r = client.post("/v1/score/realization", json=payload)
    assert r.status_code == 200
    expected = realization_score(payload["text"], payload["future"], make_table())
    assert r.json()["score"] == pytest.approx(expected)


def test_realization_endpoint_null_when_unscoreable(client):
    r = client.post("/v1/score/realization",
                    json={"text": "x", "future": "it was the"})
    assert r.status_code == 200
    assert r.json()["score"] is None


# --- error vocabulary ------------------------------------------------------------

def get_error(r):
    doc = r.json()
    assert set(doc) == {"error"} and set(doc["error"]) == {"code", "message"}
    return doc["error"]["code"]


def test_unknown_session_404(client):
    r = client.get("/v1/sessions/deadbeef")
    assert r.status_code == 404 and get_error(r) == "UNKNOWN_SESSION"
    r = client.post("/v1/sessions/deadbeef/generate", json={})
    assert r.status_code == 404 and get_error(r) == "UNKNOWN_SESSION"


def test_empty_future_400(client):
    r = client.post("/v1/sessions", json={"context": "hi", "future": "  "})
    assert r.status_code == 400 and get_error(r) == "EMPTY_FUTURE"
    sid = new_session(client)
    r = client.put(f"/v1/sessions/{sid}/future", json={"future": "", "distance": 1})
    assert r.status_code == 400 and get_error(r) == "EMPTY_FUTURE"


def test_context_too_long_400():
    app = create_app(build_model(max_seq=8), idf_table=None)
    with TestClient(app) as c:
        r = c.post("/v1/sessions", json={"context": "a" * 120, "future": "storm"})
        assert r.status_code == 400 and get_error(r) == "CONTEXT_TOO_LONG"


def test_malformed_body_400(client):
    r = client.post("/v1/sessions", json={"context": "hi", "future": "x",
                                          "no_such_field": 1})
    assert r.status_code == 400 and get_error(r) == "INVALID_REQUEST"
    sid = new_session(client)
    r = client.post(f"/v1/sessions/{sid}/generate", json={"max_new_tokens": -4})
    assert r.status_code == 400 and get_error(r) == "INVALID_REQUEST"


def test_bad_distance_400(client):
    r = client.post("/v1/sessions",
                    json={"context": "hi", "future": "x", "distance": 0})
    assert r.status_code == 400 and get_error(r) == "INVALID_REQUEST"


def test_model_not_loaded_503():
    app = create_app(None, idf_table=None)
    with TestClient(app) as c:
        r = c.post("/v1/sessions", json={"context": "hi", "future": "x"})
        assert r.status_code == 503 and get_error(r) == "MODEL_NOT_LOADED"
        r = c.post("/v1/score/realization", json={"text": "a", "future": "b"})
        assert r.status_code == 503 and get_error(r) == "MODEL_NOT_LOADED"


def test_busy_session_409(client):
    sid = new_session(client)
    url = f"/v1/sessions/{sid}/generate"
    entry = client.app.state.sessions.get(sid)
    assert entry.lock.acquire(blocking=False)
    try:
        r = client.post(url, json={"max_new_tokens": 1})
        assert r.status_code == 409 and get_error(r) == "SESSION_BUSY"
        r = client.put(f"/v1/sessions/{sid}/future",
                       json={"future": "x", "distance": 1})
        assert r.status_code == 409 and get_error(r) == "SESSION_BUSY"
        # reads stay available while a generation holds the lock
        assert client.get(f"/v1/sessions/{sid}").status_code == 200
    finally:
        entry.lock.release()
    r = client.put(f"/v1/sessions/{sid}/future",
                   json={"future": "Wolves reached the gate.", "distance": 1})
    assert r.status_code == 200


def test_session_ttl_expiry():
    app = create_app(build_model(), idf_table=None, session_ttl=0.05)
    with TestClient(app) as c:
        r = c.post("/v1/sessions", json={"context": "hi", "future": "storm"})
        sid = r.json()["id"]
        assert c.get(f"/v1/sessions/{sid}").status_code == 200
        time.sleep(0.12)
        r = c.get(f"/v1/sessions/{sid}")
        assert r.status_code == 404 and get_error(r) == "UNKNOWN_SESSION"


def test_static_ui_mount(tmp_path):
    (tmp_path / "index.html").write_text("<h1>console</h1>")
    app = create_app(build_model(), idf_table=None, ui_dir=str(tmp_path))
    with TestClient(app) as c:
        r = c.get("/")
        assert r.status_code == 200 and "console" in r.text
        assert c.post("/v1/sessions",
                      json={"context": "hi", "future": "storm"}).status_code == 201

import json
import math
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from posgen import pool as poolmod
from posgen.denoiser import Denoiser, DenoiserSpec, ZeroPredictor
from posgen.embedder import HashedNgramEmbedder
from posgen.ona import synthesize
from posgen.schedule import make_schedule
from posgen.spr import (
    DhsConfig,
    HttpEngine,
    MockEngine,
    TransportError,
    dhs_condition,
    make_engine,
    render_instruction,
    rewrite,
    synthesize_dhs,
)
from posgen.toy import make_toy_dataset

# -- instruction template --------------------------------------------------------


def test_five_reference_template():
    refs = [f"reference text {i}" for i in range(1, 6)]
    text = render_instruction("a blob moves", refs)
    assert text.startswith("Let me give you 5 examples:")
    assert all(r in text for r in refs)
    assert "a blob moves" in text
    assert "without changing the meaning" in text
    assert "maximum of 20 words" in text
    assert text.index("reference text 5") < text.index("a blob moves")


def test_no_reference_template():
    text = render_instruction("a blob moves", [])
    assert "a blob moves" in text and "maximum of 20 words" in text
    assert "example" not in text


def test_reference_text_is_inserted_literally():
    refs = ["{original}", "100% {0} {{x}}"]
    text = render_instruction("p", refs)
    assert "{original}" in text and "100% {0} {{x}}" in text
    assert "1 example:" in render_instruction("p", ["only"])


# -- engines and rewriting ----------------------------------------------------------


def test_mock_modes():
    assert rewrite("blob moves", None, 0, MockEngine("identity")).rewritten == "blob moves"
    ex = rewrite("blob moves", None, 0, MockEngine("prefix"))
    assert ex.rewritten == "detailed: blob moves" and ex.engine_tag == "mock-prefix"
    with pytest.raises(ValueError):
        MockEngine("shout")
    with pytest.raises(ValueError):
        MockEngine("fixture")


def test_fixture_mode_and_fallback(tmp_path):
    path = tmp_path / "fixture.json"
    path.write_text(json.dumps({"blob moves": "  a   blob\tglides  ", "empty": "   "}), encoding="utf-8")
    engine = MockEngine("fixture", path)
    assert rewrite("blob moves", None, 0, engine).rewritten == "a blob glides"
    missing = rewrite("unknown prompt", None, 0, engine)
    assert missing.rewritten == "unknown prompt"
    assert missing.engine_tag == "fallback" and missing.flags == ["transport_error"]
    empty = rewrite("empty", None, 0, engine)
    assert empty.rewritten == "empty" and empty.flags == ["empty_response"]
    with pytest.raises(TransportError):
        rewrite("unknown prompt", None, 0, engine, fallback=False)


def test_long_answers_are_flagged_not_truncated(tmp_path):
    long = " ".join(["word"] * 25)
    path = tmp_path / "f.json"
    path.write_text(json.dumps({"p": long}), encoding="utf-8")
    ex = rewrite("p", None, 0, MockEngine("fixture", path))
    assert ex.rewritten == long and "over_word_limit" in ex.flags


def test_references_match_sort_oracle():
    emb = HashedNgramEmbedder()
    videos = make_toy_dataset(200, 0)
    pool = poolmod.build([(v.caption, v.latent) for v in videos], emb, ids=[v.id for v in videos])
    prompt = "blob moves right"
    q = emb.embed(prompt)
    oracle = sorted(pool.entries, key=lambda e: (-np.round(math.fsum(q * e.embedding), poolmod.SIM_DECIMALS), e.id))
    ex = rewrite(prompt, pool, 5, MockEngine())
    assert ex.references == [e.text for e in oracle[:5]]
    assert ex.to_dict() == rewrite(prompt, pool, 5, MockEngine()).to_dict()
    with pytest.raises(ValueError):
        rewrite(prompt, None, 5, MockEngine())


def test_make_engine():
    assert isinstance(make_engine(mock="prefix"), MockEngine)
    assert isinstance(make_engine("http://localhost:1/x", mock=None), HttpEngine)
    with pytest.raises(ValueError):
        make_engine(None, mock=None)


class FakeLLM(BaseHTTPRequestHandler):
    script: list = []
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        FakeLLM.seen.append((body, self.headers.get("Authorization")))
        status, payload = FakeLLM.script.pop(0) if FakeLLM.script else (200, {"rewritten": "ok"})
        data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def llm_server():
    server = HTTPServer(("127.0.0.1", 0), FakeLLM)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    FakeLLM.script, FakeLLM.seen = [], []
    yield f"http://127.0.0.1:{server.server_port}/rewrite"
    server.shutdown()
    server.server_close()


def test_http_engine_wire_format(llm_server, monkeypatch):
    monkeypatch.setenv("TEST_LLM_TOKEN", "secret")
    FakeLLM.script = [(200, {"rewritten": "a  blob   glides"})]
    engine = HttpEngine(llm_server, token_env="TEST_LLM_TOKEN", timeout=5)
    ex = rewrite("blob moves", None, 0, engine)
    assert ex.rewritten == "a blob glides"
    body, auth = FakeLLM.seen[0]
    assert body == {"instruction": render_instruction("blob moves", []), "max_words": 20}
    assert auth == "Bearer secret"


def test_http_engine_retries_server_errors(llm_server):
    FakeLLM.script = [(503, {}), (429, {}), (200, {"rewritten": "third time"})]
    engine = HttpEngine(llm_server, timeout=5, retries=2, backoff=0.01)
    assert engine.complete("instruction", "orig") == "third time"
    assert len(FakeLLM.seen) == 3


def test_http_engine_gives_up_after_retries(llm_server):
    FakeLLM.script = [(500, {})] * 3
    engine = HttpEngine(llm_server, timeout=5, retries=2, backoff=0.01)
    with pytest.raises(TransportError):
        engine.complete("instruction", "orig")
    assert len(FakeLLM.seen) == 3
    FakeLLM.script = [(500, {})] * 3
    ex = rewrite("keep me", None, 0, engine)
    assert ex.rewritten == "keep me" and ex.engine_tag == "fallback"


@pytest.mark.parametrize("status, payload", [(400, {}), (200, b"not json"), (200, {"other": 1}), (200, {"rewritten": 5})])
def test_http_engine_fails_fast_on_bad_answers(llm_server, status, payload):
    FakeLLM.script = [(status, payload)]
    engine = HttpEngine(llm_server, timeout=5, retries=2, backoff=0.01)
    with pytest.raises(TransportError):
        engine.complete("instruction", "orig")
    assert len(FakeLLM.seen) == 1


def test_http_engine_unreachable():
    engine = HttpEngine("http://127.0.0.1:9/none", timeout=1, retries=1, backoff=0.01)
    with pytest.raises(TransportError):
        engine.complete("i", "o")


# -- hybrid-condition denoising ----------------------------------------------------


def test_threshold_enumeration():
    cfg = DhsConfig(0.1, 50)
    assert cfg.m == 5
    picks = {t: dhs_condition(t, cfg, "orig", "new") for t in range(1, 51)}
    assert [t for t, c in picks.items() if c == "new"] == list(range(46, 51))
    assert all(c == "orig" for t, c in picks.items() if t <= 45)


def test_boundaries():
    assert all(dhs_condition(t, DhsConfig(0.0, 7), "o", "r") == "o" for t in range(1, 8))
    assert all(dhs_condition(t, DhsConfig(1.0, 7), "o", "r") == "r" for t in range(1, 8))
    with pytest.raises(ValueError):
        dhs_condition(0, DhsConfig(0.5, 7), "o", "r")
    with pytest.raises(ValueError):
        dhs_condition(8, DhsConfig(0.5, 7), "o", "r")
    for bad in (-0.1, 1.1, float("nan")):
        with pytest.raises(ValueError):
            DhsConfig(bad, 10)


def test_decimal_gamma_floors():
    # binary 0.29 * 100 is 28.999999999999996; the step count follows the decimal value
    assert DhsConfig(0.29, 100).m == 29
    assert DhsConfig(0.07, 100).m == 7
    assert DhsConfig(0.5, 3).m == 1


def random_denoiser():
    spec = DenoiserSpec(condition_width=4, hidden_width=8, frames=2, frame_shape=(1, 2, 2), zero_output=False)
    return Denoiser(spec, make_schedule(12, 0.05))


def test_gamma_reductions_are_bit_identical():
    model = random_denoiser()
    sched = model.schedule
    rng = np.random.default_rng(0)
    noise, c, c_r = rng.standard_normal((2, 1, 2, 2)), rng.standard_normal(4), rng.standard_normal(4)
    assert np.array_equal(synthesize_dhs(c, c_r, noise, sched, model, DhsConfig(0.0, 12)), synthesize(c, noise, sched, model))
    assert np.array_equal(synthesize_dhs(c, c_r, noise, sched, model, DhsConfig(1.0, 12)), synthesize(c_r, noise, sched, model))
    mid = synthesize_dhs(c, c_r, noise, sched, model, DhsConfig(0.5, 12))
    assert not np.array_equal(mid, synthesize(c, noise, sched, model))
    with pytest.raises(ValueError):
        synthesize_dhs(c, c_r, noise, sched, model, DhsConfig(0.5, 11))


def test_zero_predictor_ignores_gamma():
    sched = make_schedule(10, 0.05)
    noise = np.random.default_rng(1).standard_normal(6)
    outs = [synthesize_dhs(np.ones(3), -np.ones(3), noise, sched, ZeroPredictor(), DhsConfig(g, 10)) for g in (0, 0.3, 1)]
    assert all(np.array_equal(outs[0], o) for o in outs)

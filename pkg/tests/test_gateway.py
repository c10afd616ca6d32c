"""Templates, scripted completions, retries, and the hash embedder."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mathlearner.gateway import (
    BackendUnavailable,
    EmptyCompletion,
    Gateway,
    HashEmbedder,
    NullBackend,
    PromptTemplate,
    RateLimited,
    RetryPolicy,
    ScriptExhausted,
    ScriptedBackend,
    TemplateError,
    UnscriptedRequest,
    fnv1a64,
    hash_embed,
    load_templates,
)
from mathlearner.store import cosine


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------

def test_render_fills_placeholders():
    template = PromptTemplate(name="t", text="Q: {problem}\nS: {solution}", role="decompose")
    out = template.render({"problem": "what?", "solution": "this."})
    assert out == "Q: what?\nS: this."


def test_render_unbound_placeholder_raises_before_backend():
    backend = ScriptedBackend({})
    gw = Gateway(backend=backend, embedder=HashEmbedder(16))
    template = PromptTemplate(name="t", text="{problem} and {missing}", role="decompose")
    with pytest.raises(TemplateError):
        gw.complete(template, {"problem": "x"}, key="p1")
    assert backend.calls == []  # precondition surfaced before any call


def test_render_does_not_rescan_values():
    template = PromptTemplate(name="t", text="{problem}", role="decompose")
    # A value containing something placeholder-shaped must pass through as-is.
    assert template.render({"problem": "literal {solution} and \\boxed{42}"}) == (
        "literal {solution} and \\boxed{42}"
    )


def test_unknown_role_rejected():
    with pytest.raises(TemplateError):
        PromptTemplate(name="t", text="x", role="chitchat")


def test_packaged_templates_cover_all_roles():
    templates = load_templates()
    assert set(templates) == {
        "decompose", "sketch", "synthesize", "repair", "featurize", "augmented_solve", "direct_solve",
    }
    assert "{problem}" in templates["direct_solve"].text


def test_templates_from_directory(tmp_path):
    for role in ("decompose", "sketch", "synthesize", "repair", "featurize", "augmented_solve", "direct_solve"):
        (tmp_path / f"{role}.txt").write_text(f"override {role}: {{problem}}", encoding="utf-8")
    templates = load_templates(tmp_path)
    assert templates["decompose"].text.startswith("override decompose")
    (tmp_path / "decompose.txt").unlink()
    with pytest.raises(TemplateError):
        load_templates(tmp_path)


# ---------------------------------------------------------------------------
# Hash embedding
# ---------------------------------------------------------------------------

def test_fnv1a64_published_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_hash_embed_deterministic():
    a = hash_embed("Solve the quadratic equation", 256)
    b = hash_embed("Solve the quadratic equation", 256)
    assert np.array_equal(a.values, b.values)


def test_hash_embed_self_cosine():
    v = hash_embed("algebra", 64)
    assert cosine(v, v) == pytest.approx(1.0, abs=1e-9)


def test_hash_embed_disjoint_tokens_orthogonal():
    # Bucket assignments verified with an independent FNV-1a script:
    # {triangle, angle, sine} -> buckets {5, 56, 216}; {polynomial, roots,
    # factor} -> {35, 66, 166} at 256 dims. No overlap, so exactly 0.
    a = hash_embed("triangle angle sine", 256)
    b = hash_embed("polynomial roots factor", 256)
    assert cosine(a, b) == 0.0


def test_hash_embed_zero_vector_stays_zero():
    v = hash_embed("?!., --", 32)
    assert v.norm == 0.0
    assert cosine(v, v) == 0.0


def test_hash_embed_tokenization():
    # Case folded, non-alphanumerics split: all three phrasings share tokens.
    a = hash_embed("Quadratic-Formula!", 128)
    b = hash_embed("quadratic formula", 128)
    assert np.array_equal(a.values, b.values)


def test_hash_embed_dimension_bound():
    with pytest.raises(ValueError):
        hash_embed("x", 1)


@given(st.text(max_size=60), st.sampled_from([8, 64, 256]))
def test_hash_embed_norm_property(text, dim):
    v = hash_embed(text, dim)
    assert v.dimension == dim
    assert v.norm == 0.0 or abs(v.norm - 1.0) <= 1e-6
    assert np.all(np.isfinite(v.values))


# ---------------------------------------------------------------------------
# Scripted backend
# ---------------------------------------------------------------------------

def _template(role="decompose"):
    return PromptTemplate(name=role, text="{problem}", role=role)


def test_scripted_pops_in_order():
    backend = ScriptedBackend({("synthesize", "p1"): ["bad", "good"]})
    gw = Gateway(backend=backend, embedder=HashEmbedder(16))
    t = _template("synthesize")
    assert gw.complete(t, {"problem": "x"}, key="p1").text == "bad"
    assert gw.complete(t, {"problem": "x"}, key="p1").text == "good"
    with pytest.raises(ScriptExhausted):
        gw.complete(t, {"problem": "x"}, key="p1")


def test_scripted_unscripted_key():
    gw = Gateway(backend=ScriptedBackend({}), embedder=HashEmbedder(16))
    with pytest.raises(UnscriptedRequest):
        gw.complete(_template(), {"problem": "x"}, key="nope")


def test_scripted_empty_text_raises():
    gw = Gateway(backend=ScriptedBackend({("decompose", "p1"): [""]}), embedder=HashEmbedder(16))
    with pytest.raises(EmptyCompletion):
        gw.complete(_template(), {"problem": "x"}, key="p1")


def test_scripted_from_file(tmp_path):
    path = tmp_path / "script.json"
    path.write_text('{"decompose": {"p1": ["1. step"], "p2": "single"}}', encoding="utf-8")
    backend = ScriptedBackend.from_file(path)
    gw = Gateway(backend=backend, embedder=HashEmbedder(16))
    assert gw.complete(_template(), {"problem": "x"}, key="p1").text == "1. step"
    assert gw.complete(_template(), {"problem": "x"}, key="p2").text == "single"


def test_null_backend():
    gw = Gateway(backend=NullBackend(), embedder=HashEmbedder(16))
    with pytest.raises(BackendUnavailable):
        gw.complete(_template(), {"problem": "x"}, key="p1")


# ---------------------------------------------------------------------------
# Retry behavior
# ---------------------------------------------------------------------------

class FlakyBackend:
    backend_id = "flaky"

    def __init__(self, failures, error=None):
        self.failures = failures
        self.calls = 0
        self.error = error or BackendUnavailable("connection reset", transient=True)

    def complete(self, role, prompt, key):
        self.calls += 1
        if self.calls <= self.failures:
            raise self.error
        from mathlearner.gateway import CompletionResult

        return CompletionResult(text="fine", backend_id=self.backend_id)


def test_transient_failures_retried_with_backoff():
    sleeps = []
    backend = FlakyBackend(failures=2)
    gw = Gateway(
        backend=backend,
        embedder=HashEmbedder(16),
        retry=RetryPolicy(max_retries=3, backoff_base=0.5, backoff_factor=2.0),
        sleeper=sleeps.append,
    )
    assert gw.complete(_template(), {"problem": "x"}, key="p1").text == "fine"
    assert backend.calls == 3
    assert sleeps == [0.5, 1.0]


def test_rate_limited_raised_after_retries():
    sleeps = []
    backend = FlakyBackend(failures=10, error=RateLimited("slow down"))
    gw = Gateway(
        backend=backend,
        embedder=HashEmbedder(16),
        retry=RetryPolicy(max_retries=2, backoff_base=0.1),
        sleeper=sleeps.append,
    )
    with pytest.raises(RateLimited):
        gw.complete(_template(), {"problem": "x"}, key="p1")
    assert backend.calls == 3  # initial + 2 retries


def test_non_transient_failure_not_retried():
    backend = FlakyBackend(failures=10, error=BackendUnavailable("bad request", transient=False))
    gw = Gateway(backend=backend, embedder=HashEmbedder(16), sleeper=lambda _: None)
    with pytest.raises(BackendUnavailable):
        gw.complete(_template(), {"problem": "x"}, key="p1")
    assert backend.calls == 1


def test_per_minute_budget_throttles():
    sleeps = []
    backend = ScriptedBackend({("decompose", "p1"): ["a", "b", "c"]})
    gw = Gateway(
        backend=backend,
        embedder=HashEmbedder(16),
        requests_per_minute=2,
        sleeper=sleeps.append,
    )
    gw.complete(_template(), {"problem": "x"}, key="p1")
    gw.complete(_template(), {"problem": "x"}, key="p1")
    assert sleeps == []  # within budget

    # the third call must wait for the window to roll; fake the clock moving
    # by clearing the recorded stamps when the sleeper fires
    def sleeper(duration):
        sleeps.append(duration)
        gw._stamps.clear()

    gw._sleeper = sleeper
    gw.complete(_template(), {"problem": "x"}, key="p1")
    assert len(sleeps) == 1
    assert 0 < sleeps[0] <= 60.0

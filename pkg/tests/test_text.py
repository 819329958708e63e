import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rqmotion.errors import ValidationError
from rqmotion.text import (K_MAX, PromptTemplates, embed_prompt, parse_response, schedule_from_tca, tca,
                           tca_decompose, tca_normalize, token_vector)


class TestEmbedding:
    def test_deterministic(self):
        a = embed_prompt("walk in a circle", 64).vector
        b = embed_prompt("walk in a circle", 64).vector
        assert a.tobytes() == b.tobytes()

    def test_normalization_symmetry(self):
        assert np.array_equal(embed_prompt("walk", 32).vector, embed_prompt("WALK  ,", 32).vector)

    def test_mean_of_tokens(self):
        w, r = token_vector("walk", 48), token_vector("run", 48)
        mean = (w + r) / 2
        expected = mean / np.linalg.norm(mean)
        np.testing.assert_allclose(embed_prompt("walk run", 48).vector, expected, atol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.text(alphabet="abcdefgh XYZ,.", min_size=1, max_size=40).filter(lambda s: any(c.isalnum() for c in s)))
    def test_unit_norm(self, text):
        assert abs(np.linalg.norm(embed_prompt(text, 40).vector.astype(np.float64)) - 1.0) < 1e-6

    def test_empty(self):
        with pytest.raises(ValidationError):
            embed_prompt("   ", 16)
        with pytest.raises(ValidationError):
            embed_prompt(",,,", 16)

    def test_client_failure_falls_back(self):
        class Broken:
            def embed(self, text, dim):
                raise ConnectionError("down")

        out = embed_prompt("jump", 16, Broken())
        assert out.source == "hash-embedder"
        assert np.array_equal(out.vector, embed_prompt("jump", 16).vector)

    def test_client_vector_used(self):
        class Fixed:
            def embed(self, text, dim):
                return np.arange(1, dim + 1, dtype=float)

        out = embed_prompt("jump", 4, Fixed())
        assert out.source == "external"
        np.testing.assert_allclose(np.linalg.norm(out.vector), 1.0, atol=1e-6)


class TestNormalize:
    def test_golf_example(self):
        assert tca_normalize("Someone imitating a golf swing.") == "imitate a golf swing"

    def test_imperative_fixed_point(self):
        assert tca_normalize("walk  forward   slowly") == "walk forward slowly"

    def test_whitespace(self):
        assert tca_normalize("   run   ") == "run"

    def test_framing_with_third_person(self):
        assert tca_normalize("The person is jumping twice") == "jump twice"
        assert tca_normalize("a human is waving") == "wave"


class TestDecompose:
    def test_spin_pause_raise(self):
        r = tca_decompose("spin, pause, raise arms")
        assert r.steps == ["spin", "pause", "raise arms"]
        assert r.rewritten == "A person spins, pauses, and raises arms."

    def test_atomic(self):
        r = tca_decompose("jump")
        assert r.k == 1 and r.steps == ["jump"]

    def test_four_steps(self):
        r = tca("walk forward then crouch then roll forward then stand")
        assert r.steps == ["walk forward", "crouch", "roll forward", "stand"]

    def test_k_max_merges_overflow(self):
        r = tca_decompose("a, b, c, d, e, f, g")
        assert r.k == K_MAX
        assert all(r.steps)

    def test_idempotent_k(self):
        r = tca("spin, pause, raise arms")
        again = tca(" then ".join(r.steps))
        assert again.k == r.k and again.steps == r.steps

    def test_rewritten_has_subject(self):
        assert tca("squat and then jump").rewritten.startswith("A person ")

    def test_empty(self):
        with pytest.raises(ValidationError):
            tca_decompose("  ")


class FakeClient:
    def __init__(self, reply=None, exc=None):
        self.reply, self.exc, self.prompts = reply, exc, []

    def complete(self, prompt):
        self.prompts.append(prompt)
        if self.exc:
            raise self.exc
        return self.reply


class TestClientPath:
    REPLY = "Normalized: spin then stop\nSteps:\n1. spin around\n2. stop\nFinal: A person spins around and stops."

    def test_parsed(self):
        client = FakeClient(self.REPLY)
        r = tca_decompose("spin then stop", PromptTemplates.load(), client)
        assert r.source == "client" and r.steps == ["spin around", "stop"]
        assert "Request: spin then stop" in client.prompts[0]

    def test_transport_failure(self):
        r = tca_decompose("spin then stop", None, FakeClient(exc=TimeoutError("slow")))
        assert r.warning and r.warning.startswith("client failure")
        assert r.steps == ["spin", "stop"]

    def test_parse_failure(self):
        r = tca_decompose("spin then stop", None, FakeClient("no sections here"))
        assert r.warning and r.warning.startswith("parse failure")
        assert r.source == "rules"

    def test_too_many_steps_rejected(self):
        steps = "\n".join(f"{i}. step{i}" for i in range(1, 8))
        with pytest.raises(ValidationError):
            parse_response(f"Normalized: x\nSteps:\n{steps}\nFinal: A person moves.")

    def test_missing_subject_rejected(self):
        with pytest.raises(ValidationError):
            parse_response("Normalized: x\nSteps:\n1. jump\nFinal: jumps high.")


class TestTemplates:
    def test_three_exemplars(self):
        t = PromptTemplates.load()
        assert len(t.exemplars) == 3
        assert all("Normalized:" in e and "Steps:" in e and "Final:" in e for e in t.exemplars)

    def test_render_mentions_limit(self):
        assert str(K_MAX) in PromptTemplates.load().render("jump")


class TestSchedule:
    def test_scheduled(self):
        r = tca("Walk, crouch, roll forward, stand")
        assert schedule_from_tca(r, 10) == [("walk", 10), ("crouch", 10), ("roll forward", 10), ("stand", 10)]

    def test_joint(self):
        r = tca("spin, pause, raise arms")
        assert schedule_from_tca(r, 5, "joint") == [(r.rewritten, 15)]

    def test_bad(self):
        r = tca("jump")
        with pytest.raises(ValidationError):
            schedule_from_tca(r, 0)
        with pytest.raises(ValidationError):
            schedule_from_tca(r, 3, "other")

import os
import socket
import threading

import numpy as np
import pytest

from finecount.errors import BackendError, SynthesisError
from finecount.synthesis import (
    GenerationResult,
    MockShapesGenerator,
    Polarity,
    category_slug,
    load_pairs,
    persist_pairs,
    synthesize_dataset,
    wire,
)
from finecount.taxonomy import CategorySpec, NegativeSource, expand_prompts


def spec_with(negatives):
    if negatives:
        return CategorySpec(name="red disk", parent="shape",
                            negative_source=NegativeSource.STATIC,
                            negatives=list(negatives))
    return CategorySpec(name="red disk", parent="shape")


# ---------------------------------------------------------------- synthesis


def test_counts_and_polarity(generator):
    spec = spec_with(["yellow diamond", "blue square"])
    bundle = expand_prompts(spec, 8, seed=0)
    pairs = synthesize_dataset(spec, bundle, generator, n_pos=8, n_neg_total=7, seed=0)
    pos = [p for p in pairs if p.polarity is Polarity.POSITIVE]
    neg = [p for p in pairs if p.polarity is Polarity.NEGATIVE]
    assert len(pos) == 8 and len(neg) == 7
    # negatives split round-robin: first category gets the remainder
    by_cat = {}
    for p in neg:
        by_cat[p.category] = by_cat.get(p.category, 0) + 1
    assert by_cat == {"yellow diamond": 4, "blue square": 3}


def test_negative_masks_are_empty(red_pairs):
    for p in red_pairs:
        if p.polarity is Polarity.NEGATIVE:
            assert p.bin_mask.sum() == 0
            assert p.avg_map is None and p.cat_map is None


def test_positive_masks_have_mass(red_pairs):
    pos = [p for p in red_pairs if p.polarity is Polarity.POSITIVE]
    assert all(p.bin_mask.sum() > 0 for p in pos)
    assert all(p.cat_map is not None and 0.0 <= p.cat_map.min() for p in pos)


def test_synthesis_deterministic(generator):
    spec = spec_with(["yellow diamond"])
    bundle = expand_prompts(spec, 5, seed=0)
    a = synthesize_dataset(spec, bundle, generator, n_pos=5, n_neg_total=5, seed=0)
    b = synthesize_dataset(spec, bundle, generator, n_pos=5, n_neg_total=5, seed=0)
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.image, pb.image)
        assert np.array_equal(pa.bin_mask, pb.bin_mask)
        assert pa.prompt == pb.prompt


def test_rejects_positive_request_without_prompts(generator):
    spec = spec_with([])
    bundle = expand_prompts(spec, 3, seed=0)
    empty = type(bundle)(positive_prompts=[], negative_prompts={})
    with pytest.raises(SynthesisError):
        synthesize_dataset(spec, empty, generator, n_pos=2, n_neg_total=0, seed=0)


def test_rejects_negative_request_without_negatives(generator):
    spec = spec_with([])
    bundle = expand_prompts(spec, 3, seed=0)
    with pytest.raises(SynthesisError):
        synthesize_dataset(spec, bundle, generator, n_pos=2, n_neg_total=2, seed=0)


class FlakyGenerator:
    """Delegates to the mock but fails a fixed fraction of generations."""

    def __init__(self, fail_every: int):
        self.inner = MockShapesGenerator()
        self.fail_every = fail_every
        self.calls = 0

    def capabilities(self):
        return self.inner.capabilities()

    def generate(self, prompt, seed):
        self.calls += 1
        if self.calls % self.fail_every == 0:
            raise BackendError("synthetic outage")
        return self.inner.generate(prompt, seed)


def test_tolerates_sparse_failures():
    spec = spec_with([])
    bundle = expand_prompts(spec, 10, seed=0)
    gen = FlakyGenerator(fail_every=10)  # 10% failures, below the abort line
    pairs = synthesize_dataset(spec, bundle, gen, n_pos=10, n_neg_total=0, seed=0)
    assert len(pairs) == 9


def test_aborts_on_heavy_failures():
    spec = spec_with([])
    bundle = expand_prompts(spec, 10, seed=0)
    gen = FlakyGenerator(fail_every=2)  # 50% failures
    with pytest.raises(SynthesisError):
        synthesize_dataset(spec, bundle, gen, n_pos=10, n_neg_total=0, seed=0)


def test_parallel_jobs_match_serial(generator):
    spec = spec_with(["yellow diamond"])
    bundle = expand_prompts(spec, 6, seed=0)
    serial = synthesize_dataset(spec, bundle, generator, n_pos=6, n_neg_total=6, seed=0, jobs=1)
    parallel = synthesize_dataset(spec, bundle, generator, n_pos=6, n_neg_total=6, seed=0, jobs=4)
    assert len(serial) == len(parallel)
    for a, b in zip(serial, parallel):
        assert a.prompt == b.prompt
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.bin_mask, b.bin_mask)


# ---------------------------------------------------------------- persistence


def test_category_slug():
    assert category_slug("Red Disk") == "red_disk"
    assert category_slug("  a  b ") == "a_b"


def test_persist_and_load_round_trip(red_pairs, tmp_path):
    persist_pairs(red_pairs, str(tmp_path))
    # layout: synth/<category>/<polarity>/<idx>.png
    assert (tmp_path / "synth" / "red_disk" / "positive" / "0000.png").is_file()
    assert (tmp_path / "synth" / "red_disk" / "positive" / "0000.json").is_file()
    assert (tmp_path / "synth" / "yellow_diamond" / "negative" / "0000.png").is_file()

    loaded = load_pairs(str(tmp_path))
    assert len(loaded) == len(red_pairs)
    key = lambda p: (p.category, p.polarity.value, p.prompt)
    for orig, back in zip(sorted(red_pairs, key=key), sorted(loaded, key=key)):
        assert np.array_equal(orig.image, back.image)
        assert np.array_equal(orig.bin_mask, back.bin_mask)
        assert orig.category == back.category
        assert orig.polarity == back.polarity
        assert orig.prompt == back.prompt


def test_load_pairs_missing_root(tmp_path):
    with pytest.raises(SynthesisError):
        load_pairs(str(tmp_path / "nowhere"))


# ---------------------------------------------------------------- wire protocol


def test_wire_round_trip_over_socket(generator):
    """A remote generator over the byte protocol matches local generation."""
    server_sock, client_sock = socket.socketpair()
    server_r = server_sock.makefile("rb")
    server_w = server_sock.makefile("wb")

    t = threading.Thread(target=wire.serve_loop, args=(server_r, server_w, generator))
    t.start()
    try:
        remote = wire.RemoteGenerator(
            client_sock.makefile("rb"), client_sock.makefile("wb"),
            generator.capabilities(),
        )
        prompt = "A photorealistic image of a few red disk. close-up, at dusk"
        local = generator.generate(prompt, seed=3)
        got = remote.generate(prompt, seed=3)
        assert np.array_equal(got.image, local.image)
        # attention crosses the wire as float32
        assert np.allclose(got.attention.values, local.attention.values,
                           rtol=0, atol=1e-6)
        assert got.attention.layers == local.attention.layers
        assert got.attention.grid == local.attention.grid
        assert got.token_spans == local.token_spans
        remote.close()
    finally:
        server_sock.close()
        client_sock.close()
        t.join(timeout=5)
    assert not t.is_alive()


def test_wire_request_round_trip(tmp_path):
    path = tmp_path / "req.bin"
    with open(path, "wb") as f:
        wire.write_request(f, "some prompt", 42)
    with open(path, "rb") as f:
        prompt, seed = wire.read_request(f)
    assert (prompt, seed) == ("some prompt", 42)


def test_wire_read_request_eof(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    with open(path, "rb") as f:
        with pytest.raises(EOFError):
            wire.read_request(f)


def test_wire_malformed_request(tmp_path):
    path = tmp_path / "garbage.bin"
    path.write_bytes(b"this is not json\n")
    with open(path, "rb") as f:
        with pytest.raises(BackendError):
            wire.read_request(f)


def test_wire_response_round_trip(generator, tmp_path):
    result = generator.generate("many blue square", seed=1)
    path = tmp_path / "resp.bin"
    with open(path, "wb") as f:
        wire.write_response(f, result)
    with open(path, "rb") as f:
        back = wire.read_response(f)
    assert isinstance(back, GenerationResult)
    assert np.array_equal(back.image, result.image)
    assert np.allclose(back.attention.values, result.attention.values,
                       rtol=0, atol=1e-6)
    assert back.token_spans == result.token_spans


def test_spawn_worker_round_trip(generator, tmp_path):
    """Full subprocess loop: spawn a worker serving the mock over stdio."""
    script = tmp_path / "worker.py"
    script.write_text(
        "import sys\n"
        "from finecount.synthesis import MockShapesGenerator, wire\n"
        "wire.serve_loop(sys.stdin.buffer, sys.stdout.buffer, MockShapesGenerator())\n"
    )
    import sys
    remote = wire.spawn_worker([sys.executable, str(script)],
                               generator.capabilities())
    try:
        local = generator.generate("exactly two green triangle", seed=8)
        got = remote.generate("exactly two green triangle", seed=8)
        assert np.array_equal(got.image, local.image)
    finally:
        remote.close()

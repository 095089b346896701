import io
import struct

import numpy as np
import pytest

from procver.data import DataError, Synthesizer, encode_features, sample_segments
from procver.online import (
    ReferencePrefixes,
    StreamClosed,
    StreamState,
    default_threshold,
    divergent_stream,
    feed,
    monitor,
    open_stream,
    prefix_embed,
    read_stream,
    windowed_distance,
)


@pytest.fixture
def frames(small_ds):
    return small_ds.features(small_ds.test.videos[0])


@pytest.fixture
def other(small_ds):
    return small_ds.features(small_ds.test.videos[-1])


def test_prefix_embed_full_length_is_eval_embedding(tiny_model, frames):
    K = tiny_model.cfg.K
    full = prefix_embed(frames, len(frames), tiny_model)
    assert np.array_equal(full, tiny_model.embed(sample_segments(frames, K, "eval")))
    assert np.array_equal(prefix_embed(frames, 9, tiny_model), prefix_embed(frames.copy(), 9, tiny_model))
    with pytest.raises(DataError):
        prefix_embed(frames, K - 1, tiny_model)
    with pytest.raises(DataError):
        prefix_embed(frames, len(frames) + 1, tiny_model)


def test_identical_stream_k0_is_zero(tiny_model, frames):
    ref = ReferencePrefixes(frames, tiny_model)
    assert all(windowed_distance(frames, t, ref, tiny_model, 0) == 0.0 for t in range(4, len(frames) + 1))


def test_k0_is_single_squared_distance(tiny_model, frames, other):
    t = 10
    d = windowed_distance(other, t, frames, tiny_model, 0)
    e = prefix_embed(other, t, tiny_model) - prefix_embed(frames, t, tiny_model)
    assert d == pytest.approx(float(e @ e), rel=1e-12)


def test_window_clamps_to_reference_range(tiny_model, frames, other):
    K, T0, k = tiny_model.cfg.K, len(frames), 5
    t = T0 - 2
    lengths = np.clip(np.arange(t - k, t + k + 1), K, T0)
    e = prefix_embed(other, t, tiny_model)
    manual = np.mean([np.sum((prefix_embed(frames, L, tiny_model) - e) ** 2) for L in lengths])
    assert windowed_distance(other, t, frames, tiny_model, k) == pytest.approx(manual, rel=1e-12)
    assert windowed_distance(other, K, frames, tiny_model, 50) >= 0


def test_short_reference_rejected(tiny_model, frames):
    with pytest.raises(DataError):
        ReferencePrefixes(frames[:3], tiny_model)


def test_infinite_threshold_never_warns(tiny_model, frames, other):
    st = monitor(frames, other, tiny_model, window_k=2, threshold=float("inf"), stride=3)
    assert st.warned_at is None
    ts = [t for t, _ in st.history]
    assert ts[0] == tiny_model.cfg.K and all(b - a == 3 for a, b in zip(ts, ts[1:]))
    assert ts[-1] <= len(other)


def test_low_threshold_warns_at_first_evaluation_once(tiny_model, frames, other):
    K = tiny_model.cfg.K
    d0 = windowed_distance(other, K, frames, tiny_model, 2)
    st = open_stream(frames, tiny_model, window_k=2, warn_threshold=d0 / 2, stride=2)
    events = feed(st, other, tiny_model)
    assert len(events) == 1 and events[0].t == K and events[0].distance > events[0].threshold
    assert st.warned_at == K
    assert feed(st, other[:4], tiny_model) == []
    assert st.warned_at == K


def test_chunking_does_not_change_history(tiny_model, frames, other):
    a = monitor(frames, other, tiny_model, 1, 1.0, 2, chunk=1)
    b = monitor(frames, other, tiny_model, 1, 1.0, 2, chunk=7)
    assert a.history == b.history and a.warned_at == b.warned_at


def test_feed_stride_override_and_closed_stream(tiny_model, frames, other):
    st = open_stream(frames, tiny_model, window_k=0)
    feed(st, other[:10], tiny_model, stride=3)
    assert [t for t, _ in st.history] == [4, 7, 10]
    st.close()
    with pytest.raises(StreamClosed):
        feed(st, other[10:], tiny_model)


def test_state_validation(tiny_model, frames):
    ref = ReferencePrefixes(frames, tiny_model)
    with pytest.raises(ValueError):
        StreamState(ref, window_k=-1)
    with pytest.raises(ValueError):
        StreamState(ref, stride=0)


def test_default_threshold():
    d = [1.0, 2.0, 3.0]
    assert default_threshold(d) == pytest.approx(2.0 + 3 * np.std(d))
    with pytest.raises(ValueError):
        default_threshold([])


def test_read_stream_round_trip_and_errors():
    x = np.random.default_rng(0).standard_normal((11, 3)).astype(np.float32)
    dim, chunks = read_stream(io.BytesIO(encode_features(x)), chunk_frames=4)
    got = list(chunks)
    assert dim == 3 and [c.shape[0] for c in got] == [4, 4, 3]
    assert np.concatenate(got).tobytes() == x.tobytes()
    # open-ended stream: header count 0
    buf = struct.pack("<4sIII", b"PVFT", 1, 0, 3) + x.tobytes()
    assert np.concatenate(list(read_stream(io.BytesIO(buf))[1])).tobytes() == x.tobytes()
    with pytest.raises(DataError, match="truncated"):
        list(read_stream(io.BytesIO(encode_features(x)[:-12]))[1])
    with pytest.raises(DataError, match="mid-row"):
        list(read_stream(io.BytesIO(encode_features(x)[:-2]))[1])
    with pytest.raises(DataError):
        read_stream(io.BytesIO(b"PV"))


def test_divergent_stream_structure(small_cfg, rng):
    synth = Synthesizer(small_cfg)
    steps = tuple(synth.vocab[:5])
    frames, div = divergent_stream(synth, steps, 2, rng)
    assert frames.shape[1] == small_cfg.D_in and 0 < div < len(frames)
    d_min, d_max = small_cfg.duration_range
    assert 2 * d_min <= div <= max(2 * d_max, small_cfg.min_frames)
    with pytest.raises(ValueError):
        divergent_stream(synth, steps, 5, rng)


def test_divergent_stream_replays_reference_prefix(small_cfg, small_ds, rng):
    synth = Synthesizer(small_cfg)
    v = small_ds.test.videos[0]
    ref = small_ds.features(v)
    dur, off = synth.video_layout(v.video_id, len(v.procedure.steps))
    assert dur.sum() == len(ref)
    frames, div = divergent_stream(synth, v.procedure.steps, 2, rng, reference=ref, ref_durations=dur, offset=off)
    assert div == dur[:2].sum()
    assert np.array_equal(frames[:div], ref[:div]) and not np.array_equal(frames[div:div + 2], ref[div:div + 2])
    with pytest.raises(ValueError):
        divergent_stream(synth, v.procedure.steps, 2, rng, reference=ref)

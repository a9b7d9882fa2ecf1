import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tfmixer import data


def make_series(events_by_var, queries=None, targets=None, sample_id="s1"):
    n = len(events_by_var)
    return data.EventSeries(sample_id=sample_id, n_variables=n,
                            events=[list(ev) for ev in events_by_var],
                            queries=[list(q) for q in (queries or [[] for _ in range(n)])],
                            targets=[list(t) for t in (targets or [[] for _ in range(n)])])


# -- parsing -------------------------------------------------------------------

def test_parse_csv_triplet(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("sample_id,variable,timestamp,value,split\n"
                 "s1,0,0.1,2.0,obs\n"
                 "s1,0,0.5,3.0,obs\n")
    samples = data.parse_events(p, format="csv-triplet")
    assert len(samples) == 1
    assert samples[0].events[0] == [(0.1, 2.0), (0.5, 3.0)]


def test_parse_empty_file(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text("")
    assert data.parse_events(p, format="jsonl") == []
    c = tmp_path / "d.csv"
    c.write_text("sample_id,variable,timestamp,value,split\n")
    assert data.parse_events(c, format="csv-triplet") == []


def test_parse_duplicate_observation_rejected(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("sample_id,variable,timestamp,value,split\n"
                 "s1,0,0.1,2.0,obs\n"
                 "s1,0,0.1,3.0,obs\n")
    with pytest.raises(data.DuplicateObservationError):
        data.parse_events(p, format="csv-triplet")


def test_parse_error_carries_line_number(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("sample_id,variable,timestamp,value,split\n"
                 "s1,0,zebra,2.0,obs\n")
    with pytest.raises(data.ParseError, match="line 2"):
        data.parse_events(p, format="csv-triplet")
    j = tmp_path / "d.jsonl"
    j.write_text('{"id": "a", "events": [[0, 1.0, 2.0]]}\nnot json\n')
    with pytest.raises(data.ParseError, match="line 2"):
        data.parse_events(j, format="jsonl")


def test_parse_query_before_history_rejected(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"id": "a", "events": [[0, 1.0, 2.0], [0, 5.0, 1.0]], "queries": [[0, 3.0, 0.5]]}\n')
    with pytest.raises(data.NonMonotonicQueryError):
        data.parse_events(p, format="jsonl")


def test_parse_duplicate_queries_rejected(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"id": "a", "events": [[0, 1.0, 2.0]], "queries": [[0, 3.0, 0.5], [0, 3.0, 0.6]]}\n')
    with pytest.raises(data.NonMonotonicQueryError):
        data.parse_events(p, format="jsonl")


def test_jsonl_round_trip(tmp_path):
    s = make_series([[(0.1, 1.0), (0.6, 2.0)], [(0.3, -1.0)]],
                    queries=[[1.2, 1.5], []], targets=[[0.4, 0.2], []])
    p = tmp_path / "d.jsonl"
    data.write_jsonl([s], p)
    loaded = data.parse_events(p, format="jsonl")
    assert loaded[0].events == s.events
    assert loaded[0].queries == s.queries
    assert loaded[0].targets == s.targets


# -- alignment -----------------------------------------------------------------

def test_pre_align_disjoint_timestamps():
    s = make_series([[(1.0, 5.0)], [(2.0, 7.0)]])
    a = data.pre_align(s)
    np.testing.assert_array_equal(a.t, [1.0, 2.0])
    np.testing.assert_array_equal(a.x, [[5.0, 0.0], [0.0, 7.0]])
    np.testing.assert_array_equal(a.m, [[1.0, 0.0], [0.0, 1.0]])


def test_pre_align_shared_timestamp_collapses():
    s = make_series([[(1.0, 5.0)], [(1.0, 7.0)]])
    a = data.pre_align(s)
    assert a.t.shape == (1,)
    np.testing.assert_array_equal(a.m, [[1.0, 1.0]])


def test_pre_align_round_trip_random():
    rng = np.random.default_rng(5)
    events = []
    for n in range(3):
        ts = np.sort(rng.choice(np.arange(1, 200), size=rng.integers(10, 20), replace=False)) / 10.0
        events.append([(float(t), float(rng.normal())) for t in ts])
    s = make_series(events)
    a = data.pre_align(s)
    expected = {(n, t, v) for n, ev in enumerate(events) for t, v in ev}
    assert data.extract_triplets(a) == expected
    # column sums of M equal per-variable event counts
    np.testing.assert_array_equal(a.m.sum(axis=0), [len(ev) for ev in events])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.lists(st.integers(0, 300), min_size=1, max_size=15), min_size=1, max_size=4),
       st.randoms(use_true_random=False))
def test_pre_align_lossless_property(int_times, rnd):
    events = []
    for ts in int_times:
        uniq = sorted(set(ts))
        events.append([(t / 7.0, rnd.uniform(-5, 5)) for t in uniq])
    s = make_series(events)
    a = data.pre_align(s)
    expected = {(n, t, v) for n, ev in enumerate(events) for t, v in ev}
    assert data.extract_triplets(a) == expected


# -- window splitting ------------------------------------------------------------

def test_window_split_basic():
    s = make_series([[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]])
    out = data.window_split(s, 2.5)
    assert [t for t, _ in out.events[0]] == [1.0, 2.0]
    assert out.queries[0] == [3.0]
    assert out.targets[0] == [3.0]
    assert out.t_cut == 2.5


def test_window_split_empty_history_error():
    s = make_series([[(1.0, 1.0), (2.0, 2.0)]])
    with pytest.raises(data.WindowSplitError):
        data.window_split(s, 0.5)
    with pytest.raises(data.WindowSplitError):
        data.window_split(s, 9.0)


def test_window_split_next_k_targets():
    events = [[(float(t), float(t)) for t in range(1, 11)]]
    s = make_series(events)
    out = data.window_split(s, 3.5, max_targets=3)
    assert out.queries[0] == [4.0, 5.0, 6.0]
    assert out.targets[0] == [4.0, 5.0, 6.0]


# -- preparation and batching ------------------------------------------------------

def test_prepare_sample_normalizes_lookback_to_unit():
    s = make_series([[(2.0, 1.0), (4.0, 2.0), (6.0, 3.0)]],
                    queries=[[8.0]], targets=[[4.0]])
    s.t_cut = 7.0
    prep = data.prepare_sample(s)
    np.testing.assert_allclose(prep.t, [0.0, 0.4, 0.8])
    assert prep.query_t[0][0] == pytest.approx(1.2)
    assert prep.t_offset == 2.0 and prep.t_scale == 5.0


def test_make_batch_single_round_trip():
    s = make_series([[(0.0, 1.0), (1.0, 2.0)], [(0.5, -1.0)]],
                    queries=[[2.0], [2.5, 3.0]], targets=[[0.1], [0.2, 0.3]])
    prep = data.prepare_sample(s)
    batch = data.make_batch([prep])
    assert batch.size == 1
    back = data.unbatch(batch)[0]
    np.testing.assert_array_equal(back.t, prep.t)
    np.testing.assert_array_equal(back.x, prep.x)
    np.testing.assert_array_equal(back.m, prep.m)
    assert back.query_t == prep.query_t
    assert back.target == prep.target


def test_make_batch_pads_to_longest():
    s1 = make_series([[(float(i), 1.0) for i in range(3)]], queries=[[5.0]], targets=[[1.0]])
    s2 = make_series([[(float(i), 2.0) for i in range(5)]], queries=[[6.0]], targets=[[2.0]])
    batch = data.make_batch([data.prepare_sample(s1), data.prepare_sample(s2)])
    assert batch.t.shape == (2, 5)
    assert batch.m[0, 3:].sum() == 0  # padded rows masked off
    assert np.all(batch.t[0, 3:] == batch.t[0, 2])  # padding repeats last timestamp
    both = data.unbatch(batch)
    assert len(both[0].t) == 3 and len(both[1].t) == 5


# -- synthesis ----------------------------------------------------------------

def synth_cfg(**kw):
    base = dict(n_samples=3, n_variables=2, rate=10.0, span=2.0,
                freqs=[[(1.0, 2.0, 0.0)], [(2.0, 1.0, 0.5)]], noise_sd=0.0, seed=3)
    base.update(kw)
    return data.SynthConfig(**base)


def test_gen_synthetic_noiseless_closed_form():
    cfg = synth_cfg()
    samples = data.gen_synthetic(cfg)
    for s in samples:
        for t, v in s.events[0]:
            assert v == pytest.approx(2.0 * np.cos(2 * np.pi * t), abs=1e-12)


def test_gen_synthetic_deterministic_per_seed():
    a = data.gen_synthetic(synth_cfg(noise_sd=0.3))
    b = data.gen_synthetic(synth_cfg(noise_sd=0.3))
    assert a[0].events == b[0].events


def test_gen_synthetic_poisson_counts():
    # rate 10 over span 30: per-variable counts ~ Poisson(300); the mean of
    # 100 iid draws has sd sqrt(300/100), so assert within 3 sigma of 300
    cfg = synth_cfg(n_samples=100, n_variables=1, rate=10.0, span=30.0,
                    freqs=[[(1.0, 1.0, 0.0)]], seed=42)
    samples = data.gen_synthetic(cfg)
    counts = [len(s.events[0]) for s in samples]
    assert abs(np.mean(counts) - 300.0) < 3.0 * np.sqrt(300.0 / 100.0)


def test_gen_synthetic_strictly_increasing_times():
    for s in data.gen_synthetic(synth_cfg(n_samples=5, rate=50.0)):
        for ev in s.events:
            ts = [t for t, _ in ev]
            assert all(b > a for a, b in zip(ts, ts[1:]))
        s.validate()

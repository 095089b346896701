"""Acceptance suite: one test group per criterion, each recording a pass/fail line.

The summary lines are printed at the end of the pytest run (see conftest). Training runs
are shared through module-scoped fixtures, so the whole file takes several minutes.
"""

import time

import numpy as np
import pytest

from procver import numerics as nx
from procver.data import (
    GeneratorConfig,
    Synthesizer,
    all_pairs,
    decode_features,
    encode_features,
    generate_dataset,
    levenshtein,
    load_manifest,
    manifest_dict,
    parse_manifest,
    read_features,
    write_features,
    write_manifest,
)
from procver.evaluation import (
    auc,
    auc_from_distances,
    distance_vs_levenshtein,
    evaluate_pairs,
    pearson,
    spearman,
    split_auc,
    split_variance,
    wdr,
)
from procver.losses import identical_orthonormal_value, sequence_alignment_loss
from procver.model import CatModel, ModelConfig
from procver.online import ReferencePrefixes, default_threshold, divergent_stream, monitor, windowed_distance
from procver.training import TrainConfig, Trainer, batch_loss, train

from conftest import ACCEPTANCE
from oracles import auc_by_counting, central_difference, edit_graph_distances, levenshtein_recursive, rel_err

# shared synthetic setup for the learning criteria
GEN = dict(
    duration_range=(6, 8),
    procedures_per_task=8,
    split_counts=(5, 0, 3),
    background_ratio=2.5,
    transform_weights={"delete": 0.25, "insert": 0.25, "swap": 0.5},
)
TRAIN = dict(epochs=40, eval_every=4, base_lr=1e-3)
SEEDS = (0, 1, 2)


def record(n, label, ok, detail):
    ACCEPTANCE.setdefault(n, []).append((label, bool(ok), detail))
    print(f"criterion {n} [{label}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def run_training(g, lam, seed, snapshots=False):
    ds = generate_dataset(g)
    mcfg = ModelConfig(D_in=g.D_in, C=len(ds.train.procedures), seed=seed)
    t0 = time.perf_counter()
    res = train(ds, mcfg, TrainConfig(lam=lam, seed=seed, **TRAIN), keep_snapshots=snapshots)
    return ds, mcfg, res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def ablation():
    """Full model and the no-alignment variant on three seeds: test pair distances and timings."""
    runs = {}
    for seed in SEEDS:
        g = GeneratorConfig(seed=seed, **GEN)
        for lam in (1.0, 0.0):
            keep = seed == 0 and lam == 1.0
            ds, mcfg, res, secs = run_training(g, lam, seed, snapshots=keep)
            runs[seed, lam] = dict(ds=ds, mcfg=mcfg, res=res, secs=secs, d=evaluate_pairs(res.model, ds, all_pairs(ds.test)))
    return runs


# ---------------------------------------------------------------- criterion 1

OPS = {
    "add": (nx.add, [(3, 4), (4,)]),
    "mul": (nx.mul, [(2, 3, 4), (3, 1)]),
    "matmul": (nx.matmul, [(2, 3, 4), (4, 3)]),
    "softmax": (lambda a: nx.softmax(a, axis=-2), [(2, 4, 3)]),
    "layer_norm": (nx.layer_norm, [(3, 6), (6,), (6,)]),
    "gelu": (nx.gelu, [(4, 5)]),
    "mean": (lambda a: nx.mean(a, axis=1), [(3, 4, 2)]),
    "l2_normalize": (nx.l2_normalize, [(4, 3)]),
    "abs_sum": (lambda a: nx.abs_sum(a, axis=-1), [(3, 5)]),
    "transpose": (nx.transpose, [(2, 3, 4)]),
    "reshape": (lambda a: nx.reshape(a, (6, 2)), [(3, 4)]),
    "diagonal": (nx.diagonal, [(2, 4, 4)]),
    "take": (lambda a: nx.take(a, slice(1, None, 2)), [(5, 3)]),
    "linear": (nx.linear, [(2, 3, 4), (4, 5), (5,)]),
    "attention": (lambda q, k, v: nx.attention(q, k, v, heads=2), [(2, 3, 4)] * 3),
    "cross_entropy": (lambda a: nx.cross_entropy(a, [0, 2, 1]), [(3, 4)]),
    "alignment_loss": (sequence_alignment_loss, [(2, 4, 5), (2, 4, 5)]),
}
POINTS = 20


def op_error(op, arrays, weight_seed):
    ts = [nx.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts)
    w = np.random.default_rng(weight_seed).standard_normal(out.shape)
    nx.sum_all(nx.mul(out, nx.Tensor(w))).backward()
    worst = 0.0
    for i, t in enumerate(ts):
        def f(x, i=i):
            with nx.no_grad():
                return float((op(*[nx.Tensor(x if j == i else a) for j, a in enumerate(arrays)]).data * w).sum())

        worst = max(worst, rel_err(t.grad, central_difference(f, arrays[i])))
    return worst


def test_criterion_01_gradient_fidelity():
    t0 = time.perf_counter()
    worst_op = {}
    for name, (op, shapes) in OPS.items():
        errs = []
        for p in range(POINTS):
            rng = np.random.default_rng(p)
            errs.append(op_error(op, [rng.standard_normal(s) for s in shapes], 1000 + p))
        worst_op[name] = max(errs)

    # full objective (classification + alignment) on a K=4, D=8, one-layer model
    worst_loss = 0.0
    for p in range(POINTS):
        rng = np.random.default_rng(p)
        m = CatModel(ModelConfig(D_in=6, D=8, K=4, layers=1, heads=2, D_prime=8, C=3, seed=p))
        clips = rng.standard_normal((4, 4, 6))
        labels = np.array([0, 0, 2, 2])
        m.zero_grad()
        batch_loss(m, clips, labels, 1.0)[0].backward()
        names = sorted(m.params)
        flat = np.concatenate([m.params[k].data.ravel() for k in names])
        analytic = np.concatenate([m.params[k].grad.ravel() for k in names])
        coords = rng.choice(flat.size, size=250, replace=False)

        def f(v):
            saved = {k: m.params[k].data for k in names}
            off = 0
            for k in names:
                n = saved[k].size
                m.params[k].data = v[off:off + n].reshape(saved[k].shape)
                off += n
            try:
                with nx.no_grad():
                    return batch_loss(m, clips, labels, 1.0)[0].item()
            finally:
                for k in names:
                    m.params[k].data = saved[k]

        num = central_difference(f, flat, coords=coords)[coords]
        worst_loss = max(worst_loss, rel_err(analytic[coords], num))
    secs = time.perf_counter() - t0
    worst = max(worst_op.values())
    record(1, "ops", worst < 1e-4, f"max rel err over {len(OPS)} ops x {POINTS} points = {worst:.2e}")
    record(1, "loss", worst_loss < 1e-4, f"max rel err of full loss over {POINTS} points = {worst_loss:.2e}")
    record(1, "runtime", secs < 30, f"{secs:.1f}s")


# ---------------------------------------------------------------- criterion 2


def test_criterion_02_closed_form_alignment_loss():
    errs = {}
    for K in (2, 4, 16):
        q, _ = np.linalg.qr(np.random.default_rng(K).standard_normal((24, K)))
        x = q.T[None]
        closed = K * (1 - np.e / (np.e + K - 1))
        errs[K] = abs(sequence_alignment_loss(x, x.copy()).item() - closed)
        assert identical_orthonormal_value(K) == pytest.approx(closed, abs=1e-12)
    ok = max(errs.values()) < 1e-9 and round(identical_orthonormal_value(16), 4) == 13.5453
    record(2, "closed form", ok, f"abs errs {({k: f'{v:.1e}' for k, v in errs.items()})}, K=16 -> {identical_orthonormal_value(16):.4f}")


# ---------------------------------------------------------------- criterion 3


def test_criterion_03_oracle_equivalence():
    rng = np.random.default_rng(3)
    mismatches = 0
    trials = 300
    for _ in range(trials):
        n_pos = int(rng.integers(1, 15))
        n_neg = int(rng.integers(1, 200 // n_pos + 1))
        pos = np.round(rng.random(n_pos) * 8) / 8
        neg = np.round(rng.random(n_neg) * 8) / 8
        mismatches += auc_from_distances(pos, neg) != auc_by_counting(pos, neg)
    record(3, "auc", mismatches == 0, f"{mismatches} mismatches over {trials} random sets of <=200 pairs")

    seqs, dist = edit_graph_distances("abc", 6)
    # the graph oracle agrees with the literal recursion on a sample
    for i, j in rng.integers(len(seqs), size=(300, 2)):
        assert dist[i, j] == levenshtein_recursive(seqs[i], seqs[j])
    bad = sum(levenshtein(a, seqs[j]) != dist[i, j] for i, a in enumerate(seqs) for j in range(len(seqs)))
    record(3, "levenshtein", bad == 0, f"{bad} mismatches over all {len(seqs) ** 2} pairs of length <=6 over 3 tokens")


# ---------------------------------------------------------------- criterion 4


def test_criterion_04_null_calibration():
    t0 = time.perf_counter()
    g = GeneratorConfig(seed=0, **GEN)
    ds = generate_dataset(g)
    pairs = all_pairs(ds.test)
    m = CatModel(ModelConfig(D_in=g.D_in, C=len(ds.train.procedures)))
    a = auc(evaluate_pairs(m, ds, pairs))
    secs = time.perf_counter() - t0
    record(4, "auc", len(pairs) >= 1000 and 0.47 <= a <= 0.53, f"random-init AUC {a:.4f} on {len(pairs)} pairs")
    record(4, "runtime", secs < 60, f"{secs:.1f}s")


# ---------------------------------------------------------------- criteria 5-8


def test_criterion_05_end_to_end(ablation):
    full, plain = ablation[0, 1.0], ablation[0, 0.0]
    ds = full["ds"]
    procs = {v.procedure.procedure_id: v.procedure for v in ds.videos}
    tasks = {p.task_id for p in procs.values()}
    per_task = min(sum(p.task_id == t for p in procs.values()) for t in tasks)
    videos = min(sum(v.procedure.procedure_id == pid for v in ds.videos) for pid in procs)
    disjoint = not {p.procedure_id for p in ds.train.procedures} & {p.procedure_id for p in ds.test.procedures}
    shape_ok = len(tasks) >= 10 and per_task >= 5 and videos >= 10 and disjoint
    record(5, "data", shape_ok, f"{len(tasks)} tasks x {per_task} procedures x {videos} videos, test procedures disjoint: {disjoint}")
    a_full, a_plain = auc(full["d"]), auc(plain["d"])
    record(5, "auc", a_full >= 0.90 and a_full > a_plain, f"with alignment {a_full:.4f}, without {a_plain:.4f}")
    record(5, "runtime", full["secs"] < 600, f"{full['secs']:.0f}s")


def test_criterion_06_order_sensitivity(ablation):
    gains = {"alter-number": [], "alter-order": []}
    for seed in SEEDS:
        with_sa, without = split_auc(ablation[seed, 1.0]["d"]), split_auc(ablation[seed, 0.0]["d"])
        for k in gains:
            gains[k].append(with_sa[k] - without[k])
    order, number = np.mean(gains["alter-order"]), np.mean(gains["alter-number"])
    per_seed = ", ".join(f"seed {s}: order {o:+.3f} number {n:+.3f}" for s, o, n in zip(SEEDS, gains["alter-order"], gains["alter-number"]))
    record(6, "split gains", order >= number, f"mean gain alter-order {order:+.4f} vs alter-number {number:+.4f} ({per_seed})")


def test_criterion_07_distance_tracks_edit_distance(ablation):
    curve = distance_vs_levenshtein(ablation[0, 1.0]["d"])
    eds = [e for e in range(1, 6) if e in curve]
    rho = spearman(eds, [curve[e] for e in eds])
    record(7, "spearman", len(eds) >= 3 and rho > 0.6, f"rho {rho:.3f} over ed buckets {eds}")


def test_criterion_08_wdr_tracks_auc(ablation):
    run = ablation[0, 1.0]
    ds, mcfg = run["ds"], run["mcfg"]
    pairs = all_pairs(ds.test)
    wdrs, aucs = [], []
    for _, state in run["res"].snapshots:
        m = CatModel(mcfg)
        m.load_state_dict(state)
        d = evaluate_pairs(m, ds, pairs)
        wdrs.append(wdr(d))
        aucs.append(auc(d))
    r = pearson(wdrs, aucs)
    record(8, "pearson", len(wdrs) >= 8 and r > 0, f"r {r:.3f} over {len(wdrs)} checkpoints")


# ---------------------------------------------------------------- criterion 9


def test_criterion_09_spread_on_shared_multiset():
    g = GeneratorConfig(
        **{**GEN, "seed": 0, "steps_range": (6, 8), "transform_weights": {"swap": 1.0}, "max_edits": 3},
    )
    spreads = {}
    for lam in (1.0, 0.0):
        ds, _, res, _ = run_training(g, lam, 0)
        spreads[lam] = split_variance(res.model, ds)
    multisets = {}
    for p in ds.test.procedures:
        multisets.setdefault(p.task_id, set()).add(tuple(sorted(map(str, p.steps))))
    same = all(len(v) == 1 for v in multisets.values()) and all(
        sum(p.task_id == t for p in ds.test.procedures) == 3 for t in multisets
    )
    a, b = spreads[1.0], spreads[0.0]
    ok = same and a["intra_procedure"] < b["intra_procedure"] and a["inter_procedure"] > b["inter_procedure"]
    record(
        9,
        "spread",
        ok,
        f"intra {a['intra_procedure']:.4f} vs {b['intra_procedure']:.4f}, inter {a['inter_procedure']:.4f} vs {b['inter_procedure']:.4f} (with vs without alignment)",
    )


# ---------------------------------------------------------------- criterion 10

ONLINE_K, ONLINE_STRIDE, STREAMS, MATCHED = 2, 1, 10, 5


@pytest.fixture(scope="module")
def online():
    g = GeneratorConfig(**{**GEN, "seed": 0, "noise_corr": 0.95})
    ds, _, res, _ = run_training(g, 1.0, 0)
    model, synth = res.model, Synthesizer(g)
    by_proc = ds.test.videos_by_procedure()
    keys = sorted(by_proc)
    K, tol = model.cfg.K, g.duration_range[1] + ONLINE_STRIDE
    rows = []
    for i in range(STREAMS):
        rng = np.random.default_rng(100 + i)
        ref_video = by_proc[keys[(7 * i) % len(keys)]][0]
        steps = ref_video.procedure.steps
        ref = ds.features(ref_video)
        dur, offset = synth.video_layout(ref_video.video_id, len(steps))
        prefixes = ReferencePrefixes(ref, model)
        # threshold from fresh recordings of the same procedure in the same setting
        matched = []
        for _ in range(MATCHED):
            f = synth.render(steps, rng, durations=dur, offset=offset)
            matched += [windowed_distance(f, t, prefixes, model, ONLINE_K) for t in range(K, len(f) + 1, ONLINE_STRIDE)]
        s = max(3, len(steps) // 2)
        stream, div = divergent_stream(synth, steps, s, rng, reference=ref, ref_durations=dur, offset=offset)
        st = monitor(ref, stream, model, ONLINE_K, default_threshold(matched), ONLINE_STRIDE)
        h = np.array(st.history)
        rows.append(dict(div=div, warned=st.warned_at, tol=tol, pre=h[h[:, 0] <= div, 1], post=h[h[:, 0] > div, 1]))
    return rows


def test_criterion_10_distance_jumps_after_divergence(online):
    pre = np.mean(np.concatenate([r["pre"] for r in online]))
    post = np.mean(np.concatenate([r["post"] for r in online]))
    per_stream = [r["post"].mean() / r["pre"].mean() for r in online]
    record(
        10,
        "ratio",
        post >= 3 * pre,
        f"post/pre {post / pre:.2f} over {len(online)} streams (per stream {min(per_stream):.2f}..{max(per_stream):.2f})",
    )


@pytest.mark.xfail(strict=True, reason="warning latency exceeds one step duration + stride on some streams; see ledger")
def test_criterion_10_warning_latency(online):
    hits = [r["warned"] is not None and r["div"] <= r["warned"] <= r["div"] + r["tol"] for r in online]
    lags = [None if r["warned"] is None else r["warned"] - r["div"] for r in online]
    record(10, "latency", all(hits), f"{sum(hits)}/{len(hits)} streams warn within {online[0]['tol']} frames; lags {lags}")


# ---------------------------------------------------------------- criterion 11


def test_criterion_11_formats_and_resume(tmp_path, small_cfg):
    rng = np.random.default_rng(11)
    arrays = [rng.standard_normal((n, d)).astype(np.float32) for n, d in ((1, 1), (37, 5), (200, 64))]
    arrays.append(np.array([[np.inf, -0.0, np.finfo(np.float32).tiny]], dtype=np.float32))
    pvft_ok = True
    for i, a in enumerate(arrays):
        write_features(tmp_path / f"{i}.pvft", a)
        back = read_features(tmp_path / f"{i}.pvft")
        pvft_ok &= back.tobytes() == a.tobytes() and decode_features(encode_features(a)).tobytes() == a.tobytes()
        pvft_ok &= encode_features(back) == (tmp_path / f"{i}.pvft").read_bytes()

    generate_dataset(small_cfg, tmp_path / "ds")
    ds = load_manifest(tmp_path / "ds")
    write_manifest(ds, tmp_path / "again.json")
    man_ok = (tmp_path / "again.json").read_bytes() == (tmp_path / "ds" / "manifest.json").read_bytes()
    man_ok &= manifest_dict(parse_manifest(manifest_dict(ds), check_files=False)) == manifest_dict(ds)
    record(11, "formats", pvft_ok and man_ok, f"PVFT {len(arrays)} arrays and manifest round-trip byte-identical: {pvft_ok and man_ok}")

    mcfg = ModelConfig(D_in=ds.dim, D=8, K=4, layers=1, heads=2, D_prime=8, C=len(ds.train.procedures))
    tcfg = TrainConfig(batch_size=8, epochs=4, K=4, base_lr=3e-3)
    full = Trainer(ds, mcfg, tcfg)
    full.run()
    part = Trainer(ds, mcfg, tcfg)
    part.run(stop_at_step=full.total_steps // 2)
    part.save(tmp_path / "mid.ckpt")
    resumed = Trainer.resume(ds, tmp_path / "mid.ckpt")
    resumed.run()
    same = [r["total"] for r in resumed.log.steps] == [r["total"] for r in full.log.steps]
    same &= all(resumed.model.params[k].data.tobytes() == v.tobytes() for k, v in full.model.state_dict().items())
    record(11, "resume", same, f"{full.total_steps}-step trajectory identical after resuming at step {full.total_steps // 2}: {same}")

"""Acceptance suite: one test per criterion, each printing a PASS line.

Criteria over trained models (6 through 9) share one full-scale pipeline run
at the default configuration; the rest use dedicated fixtures. Run with
`pytest tests/test_acceptance.py -v -s` to see the per-criterion lines.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from delm import analysis as A
from delm import corpus as C
from delm import model as M
from delm import retrieval as R
from delm import store as ST
from delm import training as T
from delm import utility as U
from delm.config import default_config
from delm.model import load_checkpoint
from delm.pipeline import load_triplets, run_pipeline

SEED = 7


def _ok(num: int, name: str, detail: str) -> None:
    print(f"\nACCEPTANCE {num:02d} {name}: PASS ({detail})")


@pytest.fixture(scope="module")
def desk_model():
    """Default-size model (d_model=64, w=512) with random init for criteria 1-3."""
    cfg = M.ModelConfig(vocab_size=300, k_contexts=4)
    return M.init_params(cfg, seed=SEED)


def random_contexts(rng, n, w=512, vocab=300, full=True):
    out = []
    for _ in range(n):
        c = np.zeros(w, dtype=np.int64)
        ln = w if full else int(rng.integers(1, w + 1))
        c[:ln] = rng.integers(4, vocab, ln)
        out.append(c)
    return out


class TestCriterion01Decoupling:
    def test_store_cached_decode_bit_exact(self, desk_model, tmp_path):
        t0 = time.monotonic()
        rng = np.random.default_rng(SEED)
        contexts = random_contexts(rng, 100, full=False)
        embedder = R.init_embedder(
            R.EmbedderConfig(vocab_size=300, max_len=512), seed=SEED)
        ST.store_build(embedder, desk_model, contexts, tmp_path / "s")
        x = np.zeros(448, dtype=np.int64)
        x[-12:] = rng.integers(4, 300, 12)
        y = np.zeros(64, dtype=np.int64)
        y[:8] = rng.integers(4, 300, 8)
        with ST.store_open(tmp_path / "s") as store:
            for i in range(100):
                cached = ST.lookup(store, i)
                fresh = M.encode_context(desk_model, contexts[i], i)
                assert np.array_equal(cached.h, fresh.h), f"context {i} value differs"
                a = M.decode_logits(desk_model, x, y, [cached])
                b = M.decode_logits(desk_model, x, y, [fresh])
                assert np.array_equal(a, b), f"context {i} decode differs"
        elapsed = time.monotonic() - t0
        assert elapsed < 60, f"took {elapsed:.1f}s"
        _ok(1, "decoupling bit-exact", f"100 contexts, {elapsed:.1f}s")


class TestCriterion02BlockDiagonal:
    def test_batched_vs_single_within_1e_6(self, desk_model):
        rng = np.random.default_rng(SEED + 1)
        worst = 0.0
        for _ in range(100):
            pair = random_contexts(rng, 2, full=False)
            batched = M.encode_contexts(desk_model, pair)
            singles = [M.encode_context(desk_model, c, i) for i, c in enumerate(pair)]
            for b, s in zip(batched, singles):
                worst = max(worst, float(np.abs(b.h - s.h).max()))
        assert worst <= 1e-6, f"max elementwise diff {worst:.3e}"
        _ok(2, "block-diagonality", f"100 pairs, max diff {worst:.2e}")


class TestCriterion03PermutationInvariance:
    def test_logits_and_greedy_invariant(self, desk_model):
        rng = np.random.default_rng(SEED + 2)
        worst = 0.0
        for trial in range(50):
            encs = M.encode_contexts(desk_model, random_contexts(rng, 4, full=False))
            x = np.zeros(448, dtype=np.int64)
            x[-10:] = rng.integers(4, 300, 10)
            y = np.zeros(64, dtype=np.int64)
            y[:6] = rng.integers(4, 300, 6)
            base_logits = M.decode_logits(desk_model, x, y, encs)
            base_decode = M.greedy_decode(desk_model, x, encs, max_len=8)
            perm = rng.permutation(4)
            shuffled = [encs[i] for i in perm]
            logits = M.decode_logits(desk_model, x, y, shuffled)
            worst = max(worst, float(np.abs(logits - base_logits).max()))
            assert worst <= 1e-4, f"trial {trial}: logits differ by {worst:.3e}"
            decode = M.greedy_decode(desk_model, x, shuffled, max_len=8)
            assert np.array_equal(base_decode, decode), f"trial {trial}: decode differs"
        _ok(3, "context-permutation invariance", f"50 trials, max logit diff {worst:.2e}")


class TestCriterion04GradientCorrectness:
    def test_grad_matches_central_differences(self):
        t0 = time.monotonic()
        cfg = M.ModelConfig(vocab_size=60, d_model=16, n_heads=2, n_enc_layers=2,
                            n_dec_layers=2, d_ff=32, max_ctx_len=24,
                            max_input_len=20, max_target_len=8, k_contexts=2)
        params = M.init_params(cfg, seed=SEED).double()
        rng = np.random.default_rng(SEED + 3)

        def make(nx, ny):
            x = np.zeros(20, dtype=np.int64)
            if nx:
                x[-nx:] = rng.integers(4, 60, nx)
            y = np.zeros(8, dtype=np.int64)
            y[:ny] = rng.integers(4, 60, ny)
            return x, y

        def ctx(n):
            c = np.zeros(24, dtype=np.int64)
            c[:n] = rng.integers(4, 60, n)
            return c

        batch = [make(5, 6) + ([ctx(10), ctx(17)],),
                 make(0, 4) + ([ctx(24)],),
                 make(7, 2) + ([],)]
        g = M.grad(params, batch)
        named = dict(params.module.named_parameters())
        names = sorted(g)
        checked = 0
        worst = 0.0
        while checked < 100:
            nm = names[int(rng.integers(len(names)))]
            t = named[nm]
            idx = tuple(int(rng.integers(s)) for s in t.shape)
            with torch.no_grad():
                orig = t[idx].item()
                h = 1e-5 * max(1.0, abs(orig))
                t[idx] = orig + h
                up = M.lm_loss(params, batch)
                t[idx] = orig - h
                dn = M.lm_loss(params, batch)
                t[idx] = orig
            fd = (up - dn) / (2 * h)
            ad = g[nm][idx]
            rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-8)
            worst = max(worst, rel)
            assert rel <= 1e-3, f"{nm}{idx}: fd {fd:.3e} vs grad {ad:.3e} (rel {rel:.2e})"
            checked += 1
        elapsed = time.monotonic() - t0
        assert elapsed < 300, f"took {elapsed:.1f}s"
        _ok(4, "gradient correctness",
            f"{checked} coordinates, worst rel err {worst:.2e}, {elapsed:.1f}s")


class TestCriterion05OracleEquivalence:
    N_INSTANCES = 200

    def test_bm25_topk(self):
        from test_retrieval import okapi_oracle_score
        rng = np.random.default_rng(SEED + 4)
        for i in range(self.N_INSTANCES):
            n_docs = int(rng.integers(2, 25))
            docs = [rng.integers(4, 14, int(rng.integers(1, 9))).astype(np.int64)
                    for _ in range(n_docs)]
            if i % 3 == 0 and n_docs >= 2:
                docs[1] = docs[0].copy()  # force exact score ties
            idx = R.bm25_build(docs)
            query = rng.integers(4, 14, int(rng.integers(1, 5))).astype(np.int64)
            k = int(rng.integers(1, n_docs + 1))
            scores = [okapi_oracle_score(docs, query, d) for d in range(n_docs)]
            expect = [(d, scores[d]) for d in
                      sorted(range(n_docs), key=lambda d: (-scores[d], d))[:k]]
            assert R.bm25_topk(idx, query, k) == expect, f"instance {i}"

    def test_vec_topk(self):
        from test_retrieval import vec_oracle
        rng = np.random.default_rng(SEED + 5)
        for i in range(self.N_INSTANCES):
            n = int(rng.integers(1, 40))
            dim = int(rng.integers(1, 9))
            keys = rng.integers(-3, 4, (n, dim)).astype(np.float32)
            q = rng.integers(-3, 4, dim).astype(np.float64)
            k = int(rng.integers(1, n + 1))
            excl = set(int(e) for e in rng.integers(0, n, int(rng.integers(0, 3))))
            assert (R.vec_topk(R.VectorIndex(keys=keys), q, k, excl)
                    == vec_oracle(keys, q, k, excl)), f"instance {i}"

    def test_lcs(self):
        from test_retrieval import lcs_oracle
        rng = np.random.default_rng(SEED + 6)
        for i in range(self.N_INSTANCES):
            a = rng.integers(0, 6, int(rng.integers(0, 30))).astype(np.int64)
            b = rng.integers(0, 6, int(rng.integers(0, 30))).astype(np.int64)
            assert R.lcs_tokens(a, b) == lcs_oracle(a, b), f"instance {i}"

    def test_proxy_utility(self):
        rng = np.random.default_rng(SEED + 7)
        for i in range(self.N_INSTANCES):
            table = U.UtilityTable.empty(min_count=2)
            for cond in ((False, True), (True, True)):
                cell = table.cells[cond]
                cell.mean = float(rng.normal())
                for tok in range(4, 12):
                    if rng.random() < 0.4:
                        cell.per_token[tok] = (float(rng.normal()), int(rng.integers(1, 5)))
            x = rng.integers(4, 12, int(rng.integers(0, 6))).astype(np.int64)
            y = rng.integers(4, 12, int(rng.integers(1, 8))).astype(np.int64)
            c = rng.integers(4, 12, int(rng.integers(0, 10))).astype(np.int64)
            # independent direct-formula evaluation
            x_set, c_set = set(x.tolist()), set(c.tolist())
            expect = 0.0
            for tok in y.tolist():
                if tok not in c_set:
                    continue
                cell = table.cells[(tok in x_set, True)]
                mean, count = cell.per_token.get(tok, (None, 0))
                expect += mean if count >= 2 else cell.mean
            assert U.proxy_utility(table, x, y, c) == expect, f"instance {i}"

    def test_warm_start_subset(self):
        rng = np.random.default_rng(SEED + 8)
        table = U.UtilityTable.empty()
        table.cells[(False, True)].mean = 1.0
        table.cells[(True, True)].mean = 0.5
        for i in range(self.N_INSTANCES):
            n = int(rng.integers(1, 12))
            triplets = []
            for _ in range(n):
                x = rng.integers(4, 10, int(rng.integers(0, 4))).astype(np.int64)
                y = rng.integers(4, 10, int(rng.integers(1, 5))).astype(np.int64)
                c = rng.integers(4, 10, int(rng.integers(0, 6))).astype(np.int64)
                triplets.append((x, y, [c]))
            frac = float(rng.uniform(0.05, 1.0))
            utils = [U.proxy_utility(table, x, y, [c[0]]) for x, y, c in triplets]
            take = math.ceil(frac * n)
            expect_idx = sorted(sorted(range(n), key=lambda j: (-utils[j], j))[:take])
            got = T.warm_start_subset(triplets, table, frac)
            assert [id(t) for t in got] == [id(triplets[j]) for j in expect_idx], f"instance {i}"

    def test_report(self):
        _ok(5, "oracle equivalence",
            f"bm25/vector top-k, lcs, proxy utility, warm start x {self.N_INSTANCES}")


# ---------------------------------------------------------------------------
# Full-scale shared fixture for criteria 6-9
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    wd = tmp_path_factory.mktemp("acceptance_run")
    cfg = default_config()
    times = {}
    t0 = time.monotonic()
    run_pipeline(cfg, wd, ["synth", "vocab", "windows", "bm25", "mine"])
    times["prep"] = time.monotonic() - t0
    t0 = time.monotonic()
    run_pipeline(cfg, wd, ["train-lm-with", "train-lm-without"])
    times["lm_train"] = time.monotonic() - t0
    t0 = time.monotonic()
    run_pipeline(cfg, wd, ["qa", "grounded"])
    times["qa"] = time.monotonic() - t0
    return wd, cfg, times


class TestCriterion06RetrievalBeatsBaseline:
    def test_eval_nll_margin(self, full_run):
        wd, cfg, times = full_run
        assert cfg.lm_steps == 5000, "criterion is defined at the default step count"
        evald = load_triplets(wd, "eval")
        params_with = load_checkpoint(wd / "lm_with.ckpt")
        params_without = load_checkpoint(wd / "lm_without.ckpt")
        nll_with, _ = T.evaluate_lm(params_with, evald, True)
        nll_without, _ = T.evaluate_lm(params_without, evald, False)
        margin = (nll_without - nll_with) / nll_without
        assert nll_with < nll_without, "with-retrieval model must be strictly better"
        assert margin >= 0.05, f"relative margin {margin:.3f} < 5%"
        assert times["lm_train"] <= 1800, f"training took {times['lm_train']:.0f}s"
        _ok(6, "retrieval beats baseline",
            f"NLL {nll_with:.3f} vs {nll_without:.3f}, margin {margin * 100:.1f}%, "
            f"trained in {times['lm_train']:.0f}s")


class TestCriterion07GroundedCopy:
    def test_heldout_qa_em(self, full_run):
        wd, _, _ = full_run
        report = json.loads((wd / "reports" / "qa_em.json").read_text())
        em_with = report["em_heldout_with"]
        em_without = report["em_heldout_without"]
        assert em_with >= 0.90, f"with-retrieval heldout EM {em_with:.3f} < 0.90"
        assert em_without <= 0.10, f"no-retrieval heldout EM {em_without:.3f} > 0.10"
        _ok(7, "grounded copy",
            f"heldout EM with {em_with:.3f} / without {em_without:.3f} "
            f"over {report['n_heldout_test']} questions")


class TestCriterion08GroundedTransfer:
    def test_transfer_rate_and_accuracy_direction(self, full_run):
        wd, _, _ = full_run
        rep = json.loads((wd / "reports" / "grounded.json").read_text())
        assert rep["in_context"] > 0
        assert rep["transfer_rate"] >= 0.50, f"transfer rate {rep['transfer_rate']:.3f}"
        assert rep["rest_total"] > 0, "accuracy comparison needs a non-empty rest bucket"
        assert rep["grounded_accuracy"] > rep["rest_accuracy"], (
            f"grounded {rep['grounded_accuracy']:.3f} <= rest {rep['rest_accuracy']:.3f}")
        _ok(8, "grounded transfer direction",
            f"rate {rep['transfer_rate']:.2f}, accuracy {rep['grounded_accuracy']:.2f} "
            f"grounded vs {rep['rest_accuracy']:.2f} rest")


class TestCriterion09BreakdownDirection:
    def test_condition_and_class_ordering(self, full_run):
        wd, cfg, _ = full_run
        vocab = C.Vocabulary.load(wd / "vocab.txt")
        evald = load_triplets(wd, "eval")
        table = A.delta_breakdown(load_checkpoint(wd / "lm_with.ckpt"),
                                  load_checkpoint(wd / "lm_without.ckpt"),
                                  evald, vocab)
        per_cond = {cond: table.condition_improvement(cond)
                    for cond in A.CONDITION_ORDER}
        best = max(per_cond, key=per_cond.get)
        assert best == (False, True), (
            f"largest improvement in {A.CONDITION_NAMES[best]}, "
            f"expected 'in context, not in input' ({per_cond})")
        content = table.class_improvement(A.CLASS_CONTENT)
        number = table.class_improvement(A.CLASS_NUMBER)
        function = table.class_improvement(A.CLASS_FUNCTION)
        assert content > function, f"CONTENT {content:.2f} <= FUNCTION {function:.2f}"
        assert number > function, f"NUMBER {number:.2f} <= FUNCTION {function:.2f}"
        _ok(9, "breakdown direction",
            f"in-ctx-not-in-input leads ({per_cond[(False, True)]:.1f}%); "
            f"CONTENT {content:.1f}% / NUMBER {number:.1f}% > FUNCTION {function:.1f}%")


class TestCriterion10BpbSanity:
    def test_uniform_bpb_and_filter(self):
        words = [f"w{i}" for i in range(251)] + ["a"]
        vocab = C.build_vocab([" ".join(words)])
        assert vocab.size == 256
        cfg = M.ModelConfig(vocab_size=256, d_model=16, n_heads=2, n_enc_layers=1,
                            n_dec_layers=1, d_ff=32, max_ctx_len=16,
                            max_input_len=8, max_target_len=4, k_contexts=2)
        params = M.init_params(cfg, seed=SEED)
        with torch.no_grad():
            for _, p in params.module.named_parameters():
                p.zero_()
        x = np.zeros(8, dtype=np.int64)
        y = np.zeros(4, dtype=np.int64)
        y[0] = vocab.id_of("a")  # one 1-byte token per chunk
        res = A.eval_bpb(params, vocab, [(x, y, [])] * 8, with_retrieval=False)
        assert abs(res.bpb - 8.0) <= 1e-6, f"bpb {res.bpb!r}"

        y2 = np.arange(10, 22, dtype=np.int64)
        nine = np.concatenate([y2[:9], [99, 98, 97]])
        eight = np.concatenate([y2[:8], [99, 98, 97, 96]])
        res2 = A.eval_bpb(params, vocab, [(x, y2, [nine]), (x, y2, [eight])],
                          overlap_threshold=8, with_retrieval=False)
        assert res2.filtered_chunks == 1 and res2.evaluated_chunks == 1
        _ok(10, "bpb sanity", f"uniform bpb {res.bpb:.9f}; 9-run filtered, 8-run kept")


class TestCriterion11LatencyShape:
    def test_cached_vs_online_factor(self, desk_model, tmp_path):
        rng = np.random.default_rng(SEED + 9)
        contexts = random_contexts(rng, 40, w=512, full=True)
        embedder = R.init_embedder(
            R.EmbedderConfig(vocab_size=300, max_len=512), seed=SEED)
        ST.store_build(embedder, desk_model, contexts, tmp_path / "bench")
        queries = random_contexts(rng, 20, w=512, full=True)
        with ST.store_open(tmp_path / "bench") as store:
            report = ST.bench_latency(store, desk_model, embedder, queries,
                                      contexts, k=2)
        assert report.payload_bytes_per_query == 2 * 512 * 64 * 4 == 262144
        assert report.speedup_mean >= 2.0, f"mean speedup {report.speedup_mean:.2f}"
        assert report.speedup_median >= 2.0, f"median speedup {report.speedup_median:.2f}"
        _ok(11, "latency shape",
            f"cached {report.cached_mean_ms:.2f}ms vs online {report.online_mean_ms:.2f}ms "
            f"({report.speedup_mean:.1f}x), payload {report.payload_bytes_per_query} B")


class TestCriterion12Determinism:
    TINY = """
seed = 13
n_entities = 6
n_attrs = 2
n_fillers = 6
eval_fillers = 2
replica_groups = 2
window_len = 48
stride = 16
input_len = 32
target_len = 16
d_model = 16
n_heads = 2
d_ff = 32
embed_d_model = 16
embed_dim = 8
lm_steps = 40
lm_batch = 4
lm_warmup = 5
eval_every = 40
retriever_steps = 20
retriever_batch = 4
qa_steps = 40
qa_batch = 4
qa_eval_every = 20
qa_ctx_len = 16
qa_pool = 6
bench_queries = 10
utility_min_count = 2
"""

    def test_pipeline_twice_byte_identical(self, tmp_path):
        import hashlib

        from delm.config import load_config
        cfg_path = tmp_path / "tiny.cfg"
        cfg_path.write_text(self.TINY)
        cfg = load_config(cfg_path)
        digests = []
        for name in ("run1", "run2"):
            wd = tmp_path / name
            run_pipeline(cfg, wd)
            files = sorted(p.relative_to(wd).as_posix()
                           for p in wd.rglob("*") if p.is_file())
            digests.append({f: hashlib.sha256((wd / f).read_bytes()).hexdigest()
                            for f in files})
        assert digests[0].keys() == digests[1].keys()
        diffs = [f for f in digests[0] if digests[0][f] != digests[1][f]]
        assert not diffs, f"artifacts differ between runs: {diffs}"
        _ok(12, "determinism",
            f"{len(digests[0])} artifacts byte-identical across two runs "
            "(manifests, checkpoints, stores, reports)")

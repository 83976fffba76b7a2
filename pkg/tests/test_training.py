import math
import random

import numpy as np
import pytest
import torch

from caselink import lexical, neural
from caselink.corpus import CaseDocument, load_dataset
from caselink.encoders import EmbeddingStore, ToyHashEncoder
from caselink.graph import build_graph
from caselink.training import (
    ContrastiveExample,
    TrainConfig,
    TrainingBatch,
    TrainingDiverged,
    combined_loss,
    deg_reg,
    info_nce,
    retrieve,
    sample_negatives,
    train_caselink,
)


def _vec(*xs):
    return torch.tensor(xs, dtype=torch.float64)


class TestInfoNce:
    def test_uniform_similarity_closed_form(self):
        v = _vec(1.0, 1.0, 0.0)
        loss = info_nce(v, v.clone(), [v.clone()], [v.clone() for _ in range(5)], 0.1)
        assert float(loss) == pytest.approx(math.log(7), abs=1e-12)

    def test_small_tau_saturates_to_zero(self):
        q = _vec(1.0, 0.0)
        loss = info_nce(q, _vec(1.0, 0.0), [_vec(-1.0, 0.0)],
                        [_vec(-1.0, 0.0)], tau=0.01)
        assert float(loss) < 1e-12

    def test_loss_nonnegative(self):
        rng = torch.Generator().manual_seed(0)
        for _ in range(20):
            vs = [torch.rand(6, generator=rng, dtype=torch.float64) + 0.01
                  for _ in range(4)]
            loss = info_nce(vs[0], vs[1], [vs[2]], [vs[3]], 0.1)
            assert float(loss) >= 0.0

    def test_zero_norm_vector_rejected(self):
        with pytest.raises(ValueError, match="zero norm"):
            info_nce(_vec(0.0, 0.0), _vec(1.0, 0.0), [], [], 0.1)

    def test_bad_tau_rejected(self):
        with pytest.raises(ValueError, match="tau"):
            info_nce(_vec(1.0), _vec(1.0), [], [], 0.0)

    def test_gradients_match_finite_differences(self):
        report = neural.check_gradients("info_nce", trials=5, seed=0)
        assert report.max_rel_err < 1e-4


class TestDegReg:
    def test_identical_vectors_give_exactly_o_times_n(self):
        # [0.5]*4 has exact unit norm, so every cosine is exactly 1.0
        states = torch.tensor([[0.5, 0.5, 0.5, 0.5]] * 6, dtype=torch.float64)
        value = deg_reg(states, row_ids=[0, 1, 2], col_ids=list(range(6)))
        assert float(value) == 3.0 * 6.0

    def test_orthonormal_rows_within_columns_sum_to_o(self):
        states = torch.eye(5, dtype=torch.float64)
        value = deg_reg(states, row_ids=[0, 1, 2], col_ids=list(range(5)))
        assert float(value) == pytest.approx(3.0, abs=1e-12)

    def test_matches_bruteforce_double_loop(self):
        rng = torch.Generator().manual_seed(4)
        for trial in range(25):
            n = 4 + trial % 8
            states = torch.rand(n, 8, generator=rng, dtype=torch.float64) - 0.3
            rows = list(range(0, n, 2))
            cols = list(range(n))
            expected = 0.0
            for i in rows:
                for j in cols:
                    a, b = states[i], states[j]
                    expected += float(a @ b) / (float(a.norm()) * float(b.norm()))
            got = float(deg_reg(states, rows, cols))
            assert got == pytest.approx(expected, abs=1e-9)

    def test_zero_norm_row_rejected(self):
        states = torch.zeros(3, 4, dtype=torch.float64)
        states[0, 0] = 1.0
        with pytest.raises(ValueError, match="zero-norm"):
            deg_reg(states, [0, 1], [0, 1, 2])

    def test_gradients_match_finite_differences(self):
        report = neural.check_gradients("deg_reg", trials=5, seed=1)
        assert report.max_rel_err < 1e-4


def _toy_graph_setup(seed=0):
    g = neural.random_test_graph(seed, n_case=8, n_charge=2, dim=5)
    cases = [g.node_ids[i] for i in g.case_indices()]
    examples = [
        ContrastiveExample(cases[0], cases[1], (cases[2],), (cases[3], cases[4])),
        ContrastiveExample(cases[5], cases[6], (cases[7],), (cases[0],)),
    ]
    batch = TrainingBatch(examples, degreg_rows=cases, degreg_cols=cases)
    params = neural.init_caselink_params(5, 4, 3, g.mode, seed, torch.float64)
    return g, batch, params


class TestCombinedLoss:
    def test_lambda_zero_equals_batch_mean_infonce(self):
        g, batch, params = _toy_graph_setup()
        cfg0 = TrainConfig(lambda_=0.0, tau=0.1)
        states = neural.caselink_forward(g, params)
        expected = torch.stack([
            info_nce(states[g.index_of(ex.query_id)], states[g.index_of(ex.pos_id)],
                     [states[g.index_of(i)] for i in ex.easy_ids],
                     [states[g.index_of(i)] for i in ex.hard_ids], 0.1)
            for ex in batch.examples
        ]).mean()
        got = combined_loss(batch, g, params, cfg0)
        assert float(got) == pytest.approx(float(expected), abs=1e-12)

    def test_weighted_sum_is_exact(self):
        g, batch, params = _toy_graph_setup(1)
        lam = 0.001
        cfg = TrainConfig(lambda_=lam, tau=0.1)
        states = neural.caselink_forward(g, params)
        nce = combined_loss(batch, g, params, TrainConfig(lambda_=0.0, tau=0.1))
        reg = deg_reg(states, [g.index_of(i) for i in batch.degreg_rows],
                      [g.index_of(i) for i in batch.degreg_cols])
        got = combined_loss(batch, g, params, cfg)
        assert float(got) == pytest.approx(float(nce) + lam * float(reg), abs=1e-12)

    def test_empty_batch_rejected(self):
        g, batch, params = _toy_graph_setup()
        batch.examples = []
        with pytest.raises(ValueError, match="empty batch"):
            combined_loss(batch, g, params, TrainConfig())

    def test_gradients_match_finite_differences(self):
        report = neural.check_gradients("combined_loss", trials=4, seed=2)
        assert report.max_rel_err < 1e-4


class TestSampleNegatives:
    def _setup(self):
        docs = [CaseDocument(f"c{i}", f"alpha tok{i} beta") for i in range(10)]
        bm25 = lexical.build_index(docs)
        query = CaseDocument("q", "alpha beta tok1")
        labels = {"q": frozenset({"c1", "c2"})}
        return docs, bm25, query, labels

    def test_disjointness(self):
        docs, bm25, query, labels = self._setup()
        rng = random.Random(0)
        easy, hard = sample_negatives(query, labels, [d.id for d in docs],
                                      n_easy=3, n_hard=3, bm25=bm25, rng=rng)
        assert not set(easy) & set(hard)
        assert not (set(easy) | set(hard)) & labels["q"]
        assert "q" not in set(easy) | set(hard)
        assert len(easy) == 3 and len(hard) == 3

    def test_zero_requested(self):
        docs, bm25, query, labels = self._setup()
        easy, hard = sample_negatives(query, labels, [d.id for d in docs],
                                      0, 0, bm25, random.Random(0))
        assert easy == [] and hard == []

    def test_pool_exhaustion_warns(self):
        docs = [CaseDocument("c0", "x"), CaseDocument("c1", "y")]
        bm25 = lexical.build_index(docs)
        labels = {"q": frozenset({"c0", "c1"})}
        with pytest.warns(UserWarning):
            easy, hard = sample_negatives(CaseDocument("q", "x"), labels,
                                          ["c0", "c1"], 1, 0, bm25,
                                          random.Random(0))
        assert easy == []

    def test_seeded_rng_is_reproducible(self):
        docs, bm25, query, labels = self._setup()
        out_a = sample_negatives(query, labels, [d.id for d in docs], 3, 2,
                                 bm25, random.Random(7))
        out_b = sample_negatives(query, labels, [d.id for d in docs], 3, 2,
                                 bm25, random.Random(7))
        assert out_a == out_b


@pytest.fixture(scope="module")
def trainable(synth_root):
    """Split + graph + init embeddings for the small planted corpus."""
    ds = load_dataset(synth_root, "train")
    charges = []
    encoder = ToyHashEncoder(16)
    pool = ds.all_cases()
    case_emb = EmbeddingStore(16, {d.id: encoder.encode(d.text) for d in pool})
    charge_emb = EmbeddingStore(16, {})
    g = build_graph(pool, charges, case_emb, charge_emb, k=3, delta=0.9)
    return ds, g, case_emb


class TestTrainCaseLink:
    def test_zero_epochs_returns_init_and_empty_log(self, trainable):
        ds, g, emb = trainable
        cfg = TrainConfig(epochs=0, seed=5, hidden_dim=8, out_dim=8)
        params, log = train_caselink(ds, g, emb, cfg)
        expected = neural.init_caselink_params(g.dim, 8, 8, g.mode, seed=5)
        for (_, ta), (_, tb) in zip(sorted(params.named().items()),
                                    sorted(expected.named().items())):
            assert torch.equal(ta, tb)
        assert log == []

    def test_same_seed_bitwise_identical_log_and_params(self, trainable):
        ds, g, emb = trainable
        cfg = TrainConfig(epochs=3, lr=1e-3, seed=9, hidden_dim=8, out_dim=8,
                          batch_size=8, patience=10)
        params_a, log_a = train_caselink(ds, g, emb, cfg)
        params_b, log_b = train_caselink(ds, g, emb, cfg)
        assert [e.to_dict() for e in log_a] == [e.to_dict() for e in log_b]
        for (_, ta), (_, tb) in zip(sorted(params_a.named().items()),
                                    sorted(params_b.named().items())):
            assert torch.equal(ta, tb)

    def test_validation_beats_random_expectation(self, trainable):
        from caselink import evalkit

        ds, g, emb = trainable
        cfg = TrainConfig(epochs=5, lr=1e-3, seed=3, hidden_dim=8, out_dim=8,
                          batch_size=16, patience=10)
        _, log = train_caselink(ds, g, emb, cfg)
        val_scores = [e.val_ndcg5 for e in log if e.val_ndcg5 is not None]
        assert val_scores, "validation slice must be evaluated"
        baseline = evalkit.random_baseline(
            ds.labels, pool_size=len(ds.candidates), k=5, trials=300, seed=0
        )
        assert max(val_scores) > baseline.ndcg

    def test_stale_init_embeddings_rejected(self, trainable):
        ds, g, _ = trainable
        stale = EmbeddingStore(
            g.dim, {nid: np.ones(g.dim) for nid in g.node_ids}
        )
        with pytest.raises(ValueError, match="rebuild the graph"):
            train_caselink(ds, g, stale, TrainConfig(epochs=1))

    def test_nan_loss_aborts_with_epoch(self, trainable, monkeypatch):
        from caselink import training as tr

        ds, g, emb = trainable
        monkeypatch.setattr(
            tr, "combined_loss",
            lambda *a, **k: torch.tensor(float("nan"), requires_grad=True),
        )
        with pytest.raises(TrainingDiverged, match="epoch 0"):
            tr.train_caselink(ds, g, emb, TrainConfig(epochs=1, seed=1))


class TestRetrieve:
    def _graph(self, features, ids=None):
        from caselink.graph import CaseLinkGraph

        n = len(features)
        ids = ids or [f"n{i}" for i in range(n)]
        return CaseLinkGraph(mode="homogeneous", node_ids=ids,
                             node_kinds=["case"] * n,
                             features=np.asarray(features, dtype=float), edges=[])

    def test_cutoff_beyond_pool_ranks_everything(self, trainable):
        ds, g, _ = trainable
        params = neural.init_caselink_params(g.dim, 8, 8, g.mode, seed=0)
        run = retrieve(g, params, ds.query_ids, ds.candidate_ids, cutoff=10_000)
        for qid in ds.query_ids:
            assert sorted(run.ranked_ids(qid)) == sorted(ds.candidate_ids)

    def test_identical_states_tie_break_by_id(self):
        feats = [[1.0, 2.0]] * 4
        g = self._graph(feats, ids=["q", "b", "a", "c"])
        params = neural.init_caselink_params(2, 3, 3, "homogeneous", seed=1)
        run = retrieve(g, params, ["q"], ["b", "a", "c"], cutoff=3)
        assert run.ranked_ids("q") == ["a", "b", "c"]

    def test_ranking_invariant_under_state_scaling(self):
        from caselink.training import _rank_by_cosine

        rng = np.random.default_rng(0)
        feats = rng.standard_normal((6, 4))
        g = self._graph(feats)
        states = torch.tensor(feats, dtype=torch.float64)
        run1 = _rank_by_cosine(states, g, ["n0"], [f"n{i}" for i in range(1, 6)])
        run2 = _rank_by_cosine(states * 2.0, g, ["n0"], [f"n{i}" for i in range(1, 6)])
        assert run1.ranked_ids("n0") == run2.ranked_ids("n0")

    def test_missing_query_node_raises(self, trainable):
        ds, g, _ = trainable
        params = neural.init_caselink_params(g.dim, 8, 8, g.mode, seed=0)
        with pytest.raises(KeyError, match="ghost"):
            retrieve(g, params, ["ghost"], ds.candidate_ids, cutoff=5)


class TestTrainConfigValidation:
    def test_bad_tau(self):
        with pytest.raises(ValueError):
            TrainConfig(tau=0.0)

    def test_bad_lambda(self):
        with pytest.raises(ValueError):
            TrainConfig(lambda_=-0.1)

    def test_bad_validation_fraction(self):
        with pytest.raises(ValueError):
            TrainConfig(validation_fraction=1.0)

import logging
import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
import torch

from corpus import Domain, PatientRecord, Visit, generate_synthetic
from errors import ConfigError, DataError, DimensionError, InputError
from hypergraph import construct_hypergraphs
from khge import EncoderConfig
from medrep import ContrastiveConfig, pretrain
from simmr import (
    LossWeights, PatientPrediction, RetrievalIndex, SimMR, SimMRConfig, alignment_loss, bce_loss, ddi_loss,
    load_recommender, mean_jaccard, multilabel_margin_loss, orthogonality_loss, predict_corpus, read_provenance,
    recommend, recommend_codes, retrieve_topk, save_recommender, select, select_topk, total_loss, train_simmr
)

SIZES = {Domain.DIAG: 4, Domain.PROC: 3, Domain.MED: 5}
REFS = [('A', 0), ('A', 1), ('A', 2), ('B', 0), ('B', 1)]


def micro_model(**overrides):
    torch.manual_seed(0)
    config = SimMRConfig(**dict(dict(heads=2, dropout=0.0, top_n=2, window=3), **overrides))
    return SimMR(SIZES, REFS, 4, config).eval()


def patient_a(last_med=frozenset({1})):
    return PatientRecord('A', [Visit({0, 1}, {0}, {0, 2}), Visit({2}, {1}, {3}), Visit({1, 3}, {2}, last_med)])


def mha_reference(attention, query, keys, values):
    """Multi-head attention for one query, evaluated head by head."""
    dim = query.shape[-1]
    heads = attention.num_heads
    width = dim // heads
    w_q, w_k, w_v = attention.in_proj_weight.split(dim)
    b_q, b_k, b_v = attention.in_proj_bias.split(dim)
    q, k, v = query @ w_q.T + b_q, keys @ w_k.T + b_k, values @ w_v.T + b_v
    out = []
    for h in range(heads):
        part = slice(h * width, (h + 1) * width)
        weights = torch.softmax(k[:, part] @ q[part] / math.sqrt(width), dim=0)
        out.append(weights @ v[:, part])
    return attention.out_proj(torch.cat(out))


def frequency_baseline(train, patients):
    """Every visit gets the training split's most frequent medications, as many as an average visit holds."""
    counts = Counter(code for patient in train for visit in patient.visits for code in visit.med)
    visits = [visit for patient in train for visit in patient.visits]
    size = max(1, round(sum(len(v.med) for v in visits) / len(visits)))
    common = frozenset(code for code, _ in counts.most_common(size))
    return [
        PatientPrediction(
            patient_id=p.patient_id, positions=list(range(len(p.visits))), truth=[v.med for v in p.visits],
            predicted=[common] * len(p.visits), probabilities=np.zeros((len(p.visits), 1)),
            gates=np.zeros((len(p.visits), 2))
        )
        for p in patients
    ]


@pytest.fixture
def model():
    return micro_model()


@pytest.fixture
def index():
    return RetrievalIndex(torch.zeros(5, 2), torch.zeros(5, 2), REFS)


class TestLosses:

    def test_bce_examples(self):
        half = torch.tensor([[0.5]])
        assert bce_loss(torch.tensor([[1.0]]), half).item() == pytest.approx(0.6931, abs=1e-4)
        assert bce_loss(torch.tensor([[0.0]]), half).item() == pytest.approx(0.6931, abs=1e-4)

    def test_bce_stays_finite_at_saturation(self):
        assert torch.isfinite(bce_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])))

    def test_margin_examples(self):
        assert multilabel_margin_loss(torch.tensor([[1, 0]]), torch.tensor([[0.9, 0.2]])).item() == \
            pytest.approx(0.15, abs=1e-6)
        assert multilabel_margin_loss(torch.tensor([[1, 1]]), torch.tensor([[0.9, 0.2]])).item() == 0.0
        assert multilabel_margin_loss(torch.tensor([[1, 0]]), torch.tensor([[1.0, 0.0]])).item() == 0.0

    def test_ddi_examples(self):
        edge = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
        assert ddi_loss(torch.tensor([[1.0, 1.0]]), edge).item() == 2.0
        assert ddi_loss(torch.tensor([[1.0, 1.0]]), torch.zeros(2, 2)).item() == 0.0
        adjacency = torch.zeros(3, 3)
        adjacency[0, 1] = adjacency[1, 0] = 1
        assert ddi_loss(torch.tensor([[0.5, 0.5, 0.0]]), adjacency).item() == pytest.approx(0.5)

    def test_losses_match_loop_evaluations(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            size = int(rng.integers(2, 17))
            m = (rng.random(size) < 0.4).astype(float)
            y = rng.random(size)
            upper = np.triu(rng.random((size, size)) < 0.3, k=1)
            adjacency = (upper | upper.T).astype(float)

            bce = -sum(math.log(y[i]) if m[i] else math.log(1 - y[i]) for i in range(size))
            margin = sum(
                max(0.0, 1 - (y[i] - y[j])) for i in range(size) for j in range(size) if m[i] and not m[j]
            ) / size
            ddi = sum(adjacency[i, j] * y[i] * y[j] for i in range(size) for j in range(size))

            mt, yt = torch.tensor(np.array([m])), torch.tensor(np.array([y]))
            assert bce_loss(mt, yt).item() == pytest.approx(bce, abs=1e-6)
            assert multilabel_margin_loss(mt, yt).item() == pytest.approx(margin, abs=1e-6)
            assert ddi_loss(yt, torch.tensor(adjacency)).item() == pytest.approx(ddi, abs=1e-6)

    def test_orthogonality_examples(self):
        a = torch.tensor([[1.0, 2.0]])
        assert orthogonality_loss(a, a).item() == pytest.approx(1.0, abs=1e-6)
        assert orthogonality_loss(a, -a).item() == pytest.approx(1.0, abs=1e-6)
        assert orthogonality_loss(a, torch.tensor([[-2.0, 1.0]])).item() == 0.0
        assert orthogonality_loss(a, torch.zeros(1, 2)).item() == 0.0

    def test_alignment_examples(self):
        eye = torch.eye(2)
        assert alignment_loss(eye, eye, eye, eye, 1.0).item() == pytest.approx(2 * math.log(1 + math.exp(-1)),
                                                                                abs=1e-4)
        single = torch.ones(1, 2)
        assert alignment_loss(single, single, single * 3, single, 0.5).item() == pytest.approx(0.0, abs=1e-6)
        assert alignment_loss(torch.zeros(0, 2), *([torch.zeros(0, 2)] * 3), 1.0).item() == 0.0

    def test_total_loss_arithmetic(self):
        parts = {name: torch.tensor(1.0) for name in ('bce', 'multi', 'ddi', 'align', 'orth')}
        assert total_loss(parts, LossWeights(1.0, 1.0, 1.0)).item() == 5.0
        assert total_loss(dict(parts, bce=torch.tensor(0.7)), LossWeights(0.0, 0.0, 0.0)).item() == \
            torch.tensor(0.7).item()
        with pytest.raises(ConfigError):
            total_loss(parts, LossWeights(multi=-0.1))


class TestSelection:

    def test_threshold_is_inclusive(self):
        assert select([0.5, 0.49, 0.9], 0.5) == frozenset({0, 2})
        assert select([0.3, 0.7], 1.0) == frozenset()

    def test_raising_the_threshold_shrinks_the_set(self):
        y = np.random.default_rng(1).random(20)
        previous = select(y, 0.0)
        for threshold in np.linspace(0.05, 1.0, 20):
            current = select(y, threshold)
            assert current <= previous
            previous = current


class TestRetrieval:

    def test_matches_an_exhaustive_scan(self):
        generator = torch.Generator().manual_seed(2)
        keys = torch.randn(50, 8, generator=generator)
        index = RetrievalIndex(keys, torch.randn(50, 8, generator=generator), [(f'P{i}', 0) for i in range(50)])
        for _ in range(10):
            query = torch.randn(8, generator=generator)
            scores = (keys @ query).numpy()
            expected = sorted(range(50), key=lambda r: (-scores[r], r))[:10]
            assert [row for row, _ in retrieve_topk(query, index, 10)] == expected

    def test_same_patient_at_or_after_the_query_is_excluded(self, index):
        np.testing.assert_array_equal(index.excluded('A', 1), [False, True, True, False, False])
        np.testing.assert_array_equal(index.excluded(None, 0), [False] * 5)
        rows = [row for row, _ in retrieve_topk(torch.ones(2), index, 5, 'A', 1)]
        assert rows == [0, 3, 4]

    @pytest.mark.parametrize('position', [None, 1.0, '1', True])
    def test_patient_without_a_position_is_rejected(self, index, position):
        with pytest.raises(InputError, match='position'):
            retrieve_topk(torch.ones(2), index, 3, patient_id='A', position=position)
        with pytest.raises(DataError):
            index.excluded('A', position)

    def test_numpy_positions_are_accepted(self, index):
        np.testing.assert_array_equal(index.excluded('B', np.int64(1)), [False, False, False, False, True])

    def test_pool_smaller_than_k_is_padded(self, index, caplog):
        with caplog.at_level(logging.WARNING, logger='simmr'):
            picked = select_topk(np.zeros((1, 5)), index, 4, [('A', 0)])
        assert caplog.records
        np.testing.assert_array_equal(picked, [[3, 4, -1, -1]])

    def test_k_zero_retrieves_nothing(self, index):
        assert retrieve_topk(torch.ones(2), index, 0) == []


class TestChannels:

    def test_health_status_starts_as_the_sum(self, model):
        a, b = torch.randn(3, 4), torch.randn(3, 4)
        torch.testing.assert_close(model.health_status(a, b), a + b)

    def test_visit_representation_matches_a_direct_evaluation(self, model):
        with torch.no_grad():
            table = model.entities['diag']
            multi_hot = torch.tensor([[1.0, 0.0, 1.0, 0.0]])
            pooled = (table[0] + table[2]) / 2
            expected = mha_reference(model.set_attention['diag'], pooled, table, table)
            actual = model.visit_representation(Domain.DIAG, multi_hot)[0]
        torch.testing.assert_close(actual, expected, atol=1e-5, rtol=1e-5)

    def test_empty_set_stays_finite(self, model):
        with torch.no_grad():
            refined = model.visit_representation(Domain.PROC, torch.zeros(1, 3))
        assert torch.isfinite(refined).all()

    def test_similar_channel_matches_a_direct_evaluation(self, model):
        with torch.no_grad():
            index = model.index()
            health = torch.randn(1, 4)
            retrieved = np.array([[0, 3, 4, 1, 2]])
            v_sim, no_evidence = model.similar_channel(health, retrieved, index)
            expected = mha_reference(model.similar_attention, health[0], index.keys[retrieved[0]],
                                     index.values[retrieved[0]])
        torch.testing.assert_close(v_sim[0], expected, atol=1e-5, rtol=1e-5)
        assert not no_evidence[0]

    def test_gates_lie_on_the_simplex(self, model):
        with torch.no_grad():
            context = model(model.batch([patient_a(), PatientRecord('C', [Visit({3}, set(), {4})])]))
        torch.testing.assert_close(context.alpha.sum(-1), torch.ones(4))
        assert (context.alpha >= 0).all()

    def test_patient_without_history_uses_its_health_status(self, model):
        with torch.no_grad():
            context = model(model.batch([PatientRecord('C', [Visit({3}, {1}, {4})])]))
        torch.testing.assert_close(context.v_hist, context.health)

    def test_excluded_pool_means_no_evidence(self, model):
        model.visit_ref = [('A', t) for t in range(5)]
        with torch.no_grad():
            context = model(model.batch([PatientRecord('A', [Visit({0}, {0}, {0})])]))
        assert context.no_evidence[0]
        torch.testing.assert_close(context.v_sim[0], torch.zeros(4))

    def test_zero_medication_table_gives_even_odds(self, model):
        with torch.no_grad():
            model.entities['med'].zero_()
            context = model(model.batch([patient_a()]))
        torch.testing.assert_close(context.probabilities, torch.full((3, 5), 0.5))
        assert select(context.probabilities[-1].numpy(), 0.5) == frozenset(range(5))


class TestInference:

    def test_current_medications_are_never_read(self, model):
        with torch.no_grad():
            first = model(model.batch([patient_a(frozenset({1}))])).logits[-1]
            second = model(model.batch([patient_a(frozenset({0, 2, 4}))])).logits[-1]
        torch.testing.assert_close(first, second)

    def test_recommend_is_deterministic(self, model):
        history = patient_a().visits[:2]
        first = recommend(model, history, {1, 3}, {2}, patient_id='A')
        second = recommend(model, history, {1, 3}, {2}, patient_id='A')
        np.testing.assert_array_equal(first.probabilities, second.probabilities)
        assert first.visit_index == 2
        assert first.alpha_hist + first.alpha_sim == pytest.approx(1.0, abs=1e-6)

    def test_cold_start_recommendation(self, model):
        rec = recommend(model, [], {0}, set())
        assert rec.visit_index == 0
        assert rec.probabilities.shape == (5,)

    def test_zero_retrieval_equals_the_history_only_path(self):
        state = micro_model().state_dict()
        without = micro_model(no_sim=True)
        empty = micro_model(top_n=0)
        without.load_state_dict(state)
        empty.load_state_dict(state)
        history = patient_a().visits[:2]
        a = recommend(without, history, {1}, {2})
        b = recommend(empty, history, {1}, {2})
        np.testing.assert_array_equal(a.probabilities, b.probabilities)
        assert (a.alpha_hist, a.alpha_sim) == (1.0, 0.0)

    def test_similarity_only_path(self):
        model = micro_model(no_hist=True)
        with torch.no_grad():
            context = model(model.batch([patient_a()]))
        torch.testing.assert_close(context.v_t, context.v_sim)
        torch.testing.assert_close(context.alpha[:, 1], torch.ones(3))

    def test_both_ablations_together_are_rejected(self):
        with pytest.raises(ConfigError):
            micro_model(no_sim=True, no_hist=True)

    def test_out_of_range_code(self, model):
        with pytest.raises(InputError):
            model.batch([PatientRecord('X', [Visit({9}, set(), {0})])])

    def test_loss_gradient_matches_finite_differences(self, model):
        model = model.double()
        batch = model.batch([patient_a(), PatientRecord('B', [Visit({1}, {0}, {4}), Visit({0, 2}, {1}, {1, 3})])])
        batch.multi_hot = {d: t.double() for d, t in batch.multi_hot.items()}

        def objective():
            return model.loss(batch, model(batch))[0]

        objective().backward()
        table = model.entities['med']
        analytic = table.grad.clone()
        eps = 1e-6
        with torch.no_grad():
            for i, j in [(0, 0), (2, 3), (4, 1)]:
                table[i, j] += eps
                upper = objective().item()
                table[i, j] -= 2 * eps
                lower = objective().item()
                table[i, j] += eps
                assert (upper - lower) / (2 * eps) == pytest.approx(analytic[i, j].item(), abs=1e-5)

    def test_visit_lengths_count_the_current_visit(self):
        prediction = PatientPrediction(
            patient_id='A', positions=[0, 1, 4], truth=[frozenset()] * 3, predicted=[frozenset()] * 3,
            probabilities=np.zeros((3, 5)), gates=np.zeros((3, 2))
        )
        assert prediction.visit_lengths == [1, 2, 5]


class TestTraining:

    @pytest.fixture(scope='class')
    def trained(self, small_corpus):
        return train_simmr(small_corpus, None, SimMRConfig(epochs=2, heads=2, dropout=0.0, top_n=3), dim=8)

    def test_history_has_one_score_per_epoch(self, trained):
        assert len(trained.history) == 2
        assert not trained.training

    def test_predictions_cover_every_visit(self, trained, small_corpus):
        patients = list(small_corpus.patients_in('test'))
        predictions = predict_corpus(trained, patients)
        assert [p.patient_id for p in predictions] == [p.patient_id for p in patients]
        for prediction, patient in zip(predictions, patients):
            assert prediction.probabilities.shape == (len(patient.visits), 24)
            assert prediction.truth == [v.med for v in patient.visits]
            assert prediction.visit_lengths == list(range(1, len(patient.visits) + 1))
        cold = predict_corpus(trained, patients, cold_start=True)
        assert all(p.positions == [0] for p in cold)
        assert 0.0 <= mean_jaccard(predictions) <= 1.0

    def test_checkpoint_round_trip(self, trained, small_corpus, synth_config, tmp_path):
        patient = small_corpus.patients_in('test')[0]
        path = save_recommender(trained, tmp_path / 'simmr.ckpt', {'corpus_digest': 'abc'})
        restored = load_recommender(path, small_corpus)
        assert read_provenance(path) == {'corpus_digest': 'abc'}
        with pytest.raises(DimensionError):
            load_recommender(path, generate_synthetic(synth_config(num_med=30)))
        history, current = list(patient.visits[:-1]), patient.visits[-1]
        expected = recommend(trained, history, current.diag, current.proc, patient.patient_id)
        actual = recommend(restored, history, current.diag, current.proc, patient.patient_id)
        np.testing.assert_allclose(actual.probabilities, expected.probabilities, atol=1e-6)
        assert restored.provenance == {'corpus_digest': 'abc'}

    def test_recommend_from_codes(self, trained):
        rec = recommend_codes(trained, None, [{'diag': ['D0000'], 'proc': [], 'med': ['M0001']}],
                              {'diag': ['D0004'], 'proc': ['P0000']})
        assert rec.visit_index == 1
        assert all(code.startswith('M') for code in rec.selected_codes)
        with pytest.raises(InputError):
            recommend_codes(trained, None, [], {'diag': ['nope']})

    def test_frozen_tables_do_not_move(self, small_corpus):
        torch.manual_seed(0)
        model = train_simmr(small_corpus, None, SimMRConfig(epochs=1, heads=2, freeze_embeddings=True), dim=8)
        assert not model.entities['med'].requires_grad


@pytest.mark.slow
def test_planted_structure_is_learned_from_pretrained_tables(synth_config):
    corpus = generate_synthetic(synth_config(num_patients=60, noise=0.0))
    encoder = EncoderConfig(dim=32, layers=1, heads=2)
    embeddings = pretrain(construct_hypergraphs(corpus), ContrastiveConfig(epochs=60, seed=0), encoder)
    model = train_simmr(corpus, embeddings, SimMRConfig(epochs=50, heads=2, dropout=0.0, learning_rate=5e-3))

    train, test = list(corpus.patients_in('train')), list(corpus.patients_in('test'))
    baseline = mean_jaccard(frequency_baseline(train, test))
    assert mean_jaccard(predict_corpus(model, train)) > 0.9
    assert mean_jaccard(predict_corpus(model, test)) >= baseline + 0.10


@pytest.mark.slow
def test_similar_patients_help_cold_start(synth_config):
    corpus = generate_synthetic(synth_config(num_patients=120))
    test = list(corpus.patients_in('test'))
    scores = {'full': [], 'no_sim': []}
    for seed in (0, 1, 2):
        full = SimMRConfig(epochs=30, heads=2, dropout=0.0, learning_rate=5e-3, seed=seed)
        for name, config in (('full', full), ('no_sim', replace(full, no_sim=True))):
            model = train_simmr(corpus, None, config, dim=32)
            scores[name].append(mean_jaccard(predict_corpus(model, test, cold_start=True)))
    assert np.mean(scores['full']) >= np.mean(scores['no_sim'])

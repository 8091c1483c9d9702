import numpy as np
import pytest

from spg import seeding
from spg.config import Method, TrainConfig
from spg.data import gen_dissimilar_stream
from spg.evaluate import avg_accuracy, backward_transfer, forward_transfer
from spg.importance import ImportanceState, zero_state
from spg.model import add_head, build_model, evaluate_accuracy
from spg.nn import GradientSet, LayerParams, ShapeError
from spg.trainer import (EwcState, ewc_penalty_grad, one_reference, run_continual,
                         train_task)


CFG = TrainConfig(lr=0.2, epochs=15, batch_size=16, patience=4, seed=0)
HIDDEN = [16, 16]


@pytest.fixture(scope="module")
def stream3():
    return gen_dissimilar_stream(3, 2, 8, 60, seed=5)


def params_bytes(model):
    parts = [p.weights.tobytes() + p.bias.tobytes() for p in model.extractor.params]
    parts += [h.weights.tobytes() + h.bias.tobytes() for _, h in sorted(model.heads.items())]
    return b"".join(parts)


class TestFirstTaskEquivalence:
    def test_spg_equals_ncl_bitwise_after_first_task(self, stream3):
        one_task = gen_dissimilar_stream(1, 2, 8, 60, seed=5)
        spg = run_continual(one_task, Method("SPG"), CFG, HIDDEN)
        ncl = run_continual(one_task, Method("NCL"), CFG, HIDDEN)
        assert params_bytes(spg.model) == params_bytes(ncl.model)

    def test_no_chi_variant_identical_for_single_task(self):
        one_task = gen_dissimilar_stream(1, 2, 8, 60, seed=6)
        a = run_continual(one_task, Method("SPG"), CFG, HIDDEN)
        b = run_continual(one_task, Method("SPG_NO_CHI"), CFG, HIDDEN)
        assert params_bytes(a.model) == params_bytes(b.model)
        assert np.array_equal(a.importance_state.per_layer[0],
                              b.importance_state.per_layer[0])


class TestTrainTask:
    def test_saturated_importance_freezes_extractor(self, stream3):
        task = stream3.tasks[0]
        model = build_model(8, HIDDEN, np.random.default_rng(1))
        rng = seeding.derived_rng(0, seeding.TASK, 0)
        add_head(model, 0, 2, rng)
        gamma = np.nextafter(1.0, 0.0)  # 1 - ulp
        state = ImportanceState([np.full(p.size, gamma) for p in model.extractor.params],
                                1, gamma)
        before = [p.flat().copy() for p in model.extractor.params]
        train_task(model, 0, task, CFG, Method("SPG"), rng, importance_state=state)
        drift = max(np.abs(p.flat() - b).max()
                    for p, b in zip(model.extractor.params, before))
        assert drift <= 1e-9

    @pytest.mark.parametrize("tag", ["NCL", "SPG", "SPG_NO_CHI", "SPG_NO_SMH",
                                     "SPG_HARD(0.6)", "SPG_FI", "EWC_FI(5)", "EWC_GI(5)"])
    def test_training_loss_decreases(self, stream3, tag):
        task = stream3.tasks[0]
        method = Method.parse(tag)
        model = build_model(8, HIDDEN, np.random.default_rng(2))
        rng = seeding.derived_rng(0, seeding.TASK, 0)
        add_head(model, 0, 2, rng)
        state = zero_state(model) if method.is_spg_family else None
        cfg = TrainConfig(lr=0.1, epochs=6, batch_size=16, patience=6, seed=0)
        log = train_task(model, 0, task, cfg, method, rng, importance_state=state)
        assert log.epochs_run >= 2
        assert log.train_losses[-1] < log.train_losses[0]

    def test_previous_heads_never_change(self, stream3):
        captured = {}

        def keep(t, model, _state):
            captured[t] = {k: h.flat().copy() for k, h in model.heads.items()}

        run_continual(stream3, Method("SPG"), CFG, HIDDEN, after_task=keep)
        for t in (1, 2):
            for old in range(t):
                assert np.array_equal(captured[t][old], captured[old][old])

    def test_spg_needs_importance_state(self, stream3):
        model = build_model(8, HIDDEN, np.random.default_rng(3))
        rng = seeding.derived_rng(0, seeding.TASK, 0)
        add_head(model, 0, 2, rng)
        with pytest.raises(ValueError, match="importance state"):
            train_task(model, 0, stream3.tasks[0], CFG, Method("SPG"), rng)


class TestEwcPenalty:
    def test_unit_example(self):
        params = [LayerParams(np.array([[1.0]]), np.array([1.0]))]
        state = EwcState([np.zeros(2)], [np.ones(2)])
        penalty, grads = ewc_penalty_grad(params, state, lam=1.0)
        assert penalty == pytest.approx(1.0, abs=1e-15)  # 0.5 * (1 + 1)
        assert np.array_equal(grads.layers[0].flat(), np.array([1.0, 1.0]))

    def test_zero_at_anchor(self):
        params = [LayerParams(np.array([[0.3, -0.2]]), np.array([0.1]))]
        anchor = [params[0].flat().copy()]
        state = EwcState(anchor, [np.full(3, 2.0)])
        penalty, grads = ewc_penalty_grad(params, state, lam=3.0)
        assert penalty == 0.0
        assert np.all(grads.layers[0].flat() == 0.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        params = [LayerParams(rng.normal(size=(3, 2)), rng.normal(size=3)),
                  LayerParams(rng.normal(size=(2, 3)), rng.normal(size=2))]
        state = EwcState([rng.normal(size=9), rng.normal(size=8)],
                         [rng.uniform(0.1, 2.0, size=9), rng.uniform(0.1, 2.0, size=8)])
        lam = 1.7
        _, grads = ewc_penalty_grad(params, state, lam)
        h = 1e-6
        for li, p in enumerate(params):
            flat = p.flat()
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                p.set_flat(flat)
                up, _ = ewc_penalty_grad(params, state, lam)
                flat[k] = orig - h
                p.set_flat(flat)
                down, _ = ewc_penalty_grad(params, state, lam)
                flat[k] = orig
                p.set_flat(flat)
                numeric = (up - down) / (2 * h)
                analytic = grads.layers[li].flat()[k]
                assert abs(analytic - numeric) <= 1e-8 * max(1.0, abs(analytic))

    def test_shape_mismatch_rejected(self):
        params = [LayerParams(np.zeros((2, 2)), np.zeros(2))]
        state = EwcState([np.zeros(5)], [np.zeros(5)])
        with pytest.raises(ShapeError):
            ewc_penalty_grad(params, state, 1.0)

    def test_penalty_changes_training(self, stream3):
        strong = run_continual(stream3, Method.parse("EWC_GI(5)"), CFG, HIDDEN)
        plain = run_continual(stream3, Method("NCL"), CFG, HIDDEN)
        assert params_bytes(strong.model) != params_bytes(plain.model)


class TestRunContinual:
    def test_histories_shape(self, stream3):
        r = run_continual(stream3, Method("SPG"), CFG, HIDDEN)
        assert r.matrix.is_complete()
        assert len(r.blocked_history) == 3
        assert all(b is not None for b in r.blocked_history)
        assert r.chi_history[0] is None  # no previous heads yet
        assert r.chi_history[1] is not None and r.chi_history[2] is not None
        assert all(s is not None for s in r.importance_history)

    def test_no_chi_has_no_overwrite_stats(self, stream3):
        r = run_continual(stream3, Method("SPG_NO_CHI"), CFG, HIDDEN)
        assert all(c is None for c in r.chi_history)

    def test_importance_monotone_across_tasks(self, stream3):
        r = run_continual(stream3, Method("SPG"), CFG, HIDDEN)
        for earlier, later in zip(r.importance_history, r.importance_history[1:]):
            for a, b in zip(earlier.per_layer, later.per_layer):
                assert np.all(b >= a)

    def test_recorded_accuracies_reproducible(self, stream3):
        r = run_continual(stream3, Method("SPG"), CFG, HIDDEN)
        for tau in range(3):
            again = evaluate_accuracy(r.model, tau, stream3.tasks[tau].test)
            assert again == r.matrix.get(tau, 2)

    def test_deterministic_replay(self, stream3):
        a = run_continual(stream3, Method("SPG"), CFG, HIDDEN)
        b = run_continual(stream3, Method("SPG"), CFG, HIDDEN)
        assert params_bytes(a.model) == params_bytes(b.model)
        assert np.array_equal(a.matrix.values, b.matrix.values, equal_nan=True)

    def test_ewc_gi_shares_spg_importance_after_first_task(self, stream3):
        spg = run_continual(stream3, Method("SPG"), CFG, HIDDEN)
        ewc = run_continual(stream3, Method.parse("EWC_GI(5)"), CFG, HIDDEN)
        for a, b in zip(spg.importance_history[0].per_layer,
                        ewc.importance_history[0].per_layer):
            assert np.array_equal(a, b)

    def test_resume_equals_uninterrupted(self, stream3):
        snaps = []
        full = run_continual(stream3, Method("SPG"), CFG, HIDDEN,
                             snapshot_hook=snaps.append, config_hash="h")
        resumed = run_continual(stream3, Method("SPG"), CFG, HIDDEN,
                                resume_from=snaps[0], config_hash="h")
        assert params_bytes(resumed.model) == params_bytes(full.model)
        assert np.array_equal(resumed.matrix.values, full.matrix.values, equal_nan=True)
        assert resumed.blocked_history == full.blocked_history
        assert resumed.epochs_history == full.epochs_history

    def test_resume_rejects_foreign_snapshot(self, stream3):
        snaps = []
        run_continual(stream3, Method("SPG"), CFG, HIDDEN,
                      snapshot_hook=snaps.append, config_hash="h")
        with pytest.raises(ValueError):
            run_continual(stream3, Method("NCL"), CFG, HIDDEN,
                          resume_from=snaps[0], config_hash="h")
        with pytest.raises(ValueError):
            run_continual(stream3, Method("SPG"), CFG, HIDDEN,
                          resume_from=snaps[0], config_hash="other")


class TestReferences:
    def test_one_reference_has_zero_transfer_by_definition(self, stream3):
        beta, result = one_reference(stream3, CFG, HIDDEN)
        assert forward_transfer(result.matrix, beta) == 0.0
        assert backward_transfer(result.matrix) == 0.0

    def test_one_rows_constant(self, stream3):
        _, result = one_reference(stream3, CFG, HIDDEN)
        for t in range(3):
            row = [result.matrix.get(t, j) for j in range(t, 3)]
            assert len(set(row)) == 1

    def test_single_task_stream_boundary(self):
        one_task = gen_dissimilar_stream(1, 2, 8, 60, seed=9)
        beta, result = one_reference(one_task, CFG, HIDDEN)
        r = run_continual(one_task, Method("SPG"), CFG, HIDDEN)
        assert r.matrix.n_tasks == 1
        assert backward_transfer(r.matrix) is None
        fwt = forward_transfer(r.matrix, beta)
        assert fwt == r.matrix.get(0, 0) - beta[0]

    def test_mtl_trains_all_heads_jointly(self, stream3):
        r = run_continual(stream3, Method("MTL"), CFG, HIDDEN)
        assert r.matrix.is_complete()
        assert set(r.model.heads) == {0, 1, 2}
        assert avg_accuracy(r.matrix) > 0.5
        assert backward_transfer(r.matrix) == 0.0

import numpy as np
import pytest

from diffcard.mlp import Mlp
from diffcard.schedule import DiffusionSchedule, DomainError, mixture_score
from diffcard.score import (HEAD, TAIL, ScoreModel, TrainConfig, _batch, branch_loss, default_head_widths,
                            default_tail_widths, select_epsilon, train, write_loss_trace)

S = DiffusionSchedule()


def zero_model(d=2):
    return ScoreModel(S, d, Mlp.zeros(default_head_widths(d)), Mlp.zeros(default_tail_widths(d)))


@pytest.fixture(scope="module")
def symmetric_model():
    m = ScoreModel(S, 1, seed=0)
    m, trace = train(m, np.array([[-1.0], [1.0]]), TrainConfig(epochs=10, steps_per_epoch=200, target="exact"))
    return m, trace


@pytest.fixture(scope="module", params=["exact", "denoising"])
def single_point_model(request):
    m = ScoreModel(S, 1, seed=0)
    cfg = TrainConfig(epochs=10, steps_per_epoch=200, target=request.param, branches=(HEAD,))
    m, _ = train(m, np.array([[0.0]]), cfg)
    return m


class TestServing:
    def test_zero_tail(self, rng):
        x = rng.standard_normal((5, 2))
        for t in (S.T_trunc + 1e-3, 1.0, S.T):
            np.testing.assert_allclose(zero_model().score(x, t), -x / S.sigma2(t), rtol=1e-12)

    def test_zero_head(self, rng):
        x = rng.standard_normal((5, 2))
        for t in (S.epsilon, 0.05, S.T_trunc):
            assert not zero_model().score(x, t).any()

    @pytest.mark.parametrize("t", [S.epsilon / 2, S.T + 1e-9, np.nan])
    def test_domain(self, t):
        with pytest.raises(DomainError):
            zero_model().score(np.zeros(2), t)

    def test_boundary_uses_head(self, rng):
        _, br = zero_model().score(rng.standard_normal((50, 2)), S.T_trunc, return_branch=True)
        assert set(br) == {HEAD}
        _, br = zero_model().score(np.zeros(2), np.nextafter(S.T_trunc, 1.0), return_branch=True)
        assert br == TAIL

    def test_per_row_times(self, rng):
        m = ScoreModel(S, 3, seed=1)
        x = rng.standard_normal((6, 3))
        t = np.array([S.epsilon, 0.01, S.T_trunc, 0.2, 1.0, S.T])
        batch = m.score(x, t)
        for i in range(6):
            np.testing.assert_allclose(batch[i], m.score(x[i], t[i]), rtol=1e-6)

    def test_width_validation(self):
        with pytest.raises(ValueError):
            ScoreModel(S, 2, head=Mlp.zeros([4, 8, 4]))

    def test_default_widths(self):
        m = ScoreModel(S, 7)
        assert m.head.widths == [9, 96, 96, 96, 21]
        assert m.tail.widths == [9, 48, 48, 7]
        assert m.n_bytes == 4 * (m.head.n_params + m.tail.n_params)


class TestTargets:
    def test_denoising_target(self):
        rng = np.random.default_rng(3)
        pts = rng.standard_normal((30, 2))
        cfg = TrainConfig(batch_size=64, target="denoising")
        x, t, target = _batch(S, pts, HEAD, "adjust", cfg, np.random.default_rng(9), pts)
        # replay the same draws to recover the clean points
        r = np.random.default_rng(9)
        t2 = r.uniform(S.epsilon, S.T_trunc, 64)
        x0 = pts[r.integers(0, 30, 64)]
        np.testing.assert_array_equal(t, t2)
        np.testing.assert_allclose(target, (x0 / S.k(t)[:, None] - x) / S.sigma2(t)[:, None], rtol=1e-7, atol=1e-9)

    def test_exact_target_is_mixture_score(self):
        rng = np.random.default_rng(4)
        pts = rng.standard_normal((25, 2))
        cfg = TrainConfig(batch_size=16, target="exact")
        x, t, target = _batch(S, pts, TAIL, "explore", cfg, rng, pts)
        for i in range(16):
            np.testing.assert_allclose(target[i], mixture_score(S, pts, t[i], x[i]), rtol=1e-9)

    def test_unknown_target(self):
        with pytest.raises(ValueError):
            _batch(S, np.zeros((2, 1)), HEAD, "adjust", TrainConfig(target="noise"), np.random.default_rng(0),
                   np.zeros((2, 1)))


class TestTrainConfig:
    def test_phase_pattern(self):
        ph = TrainConfig(epochs=10).phases()
        assert ph[:6] == ["explore", "explore", "adjust"] * 2
        assert ph[-2:] == ["adjust", "adjust"]
        assert len(ph) == 10

    def test_exploration_windows(self):
        cfg = TrainConfig()
        r = np.random.default_rng(0)
        from diffcard.score import sample_times

        h = sample_times(S, HEAD, "explore", 10000, r, cfg)
        assert h.min() >= S.epsilon and h.max() <= 1.0 / 32
        tl = sample_times(S, TAIL, "explore", 10000, r, cfg)
        assert tl.min() >= S.T_trunc and tl.max() <= 0.5
        a = sample_times(S, TAIL, "adjust", 10000, r, cfg)
        assert a.max() > 2.5


class TestTraining:
    def test_symmetric_pair(self, symmetric_model):
        m, _ = symmetric_model
        t = np.linspace(S.T_trunc * 1.001, S.T, 25)
        assert np.max(np.abs(m.score(np.zeros((25, 1)), t))) < 0.05

    def test_trace(self, symmetric_model):
        _, trace = symmetric_model
        assert trace and all(np.isfinite(r.mean_loss) for r in trace)
        for br in (HEAD, TAIL):
            adj = [r.mean_loss for r in trace if r.branch == br and r.phase == "adjust"]
            assert adj[-1] <= adj[0]

    def test_trace_csv(self, symmetric_model, tmp_path):
        _, trace = symmetric_model
        write_loss_trace(trace, tmp_path / "loss.csv")
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,branch,phase,mean_loss"
        assert len(lines) == len(trace) + 1

    def test_single_point_cloud(self, single_point_model):
        m = single_point_model
        r = np.random.default_rng(0)
        for t in np.geomspace(S.epsilon, S.T_trunc, 12):
            sg = float(S.sigma(t))
            x = r.uniform(-2 * sg, 2 * sg, (300, 1))
            exact = -x / sg**2
            assert np.linalg.norm(m.score(x, t) - exact) / np.linalg.norm(exact) < 0.1

    def test_branch_losses_beat_zero_network(self, symmetric_model):
        m, _ = symmetric_model
        pts = np.array([[-1.0], [1.0]])
        for br in (HEAD, TAIL):
            loss, zero = branch_loss(m, pts, br)
            assert loss <= 0.5 * zero

    def test_empty_and_mismatched_clouds(self):
        with pytest.raises(ValueError):
            train(ScoreModel(S, 2), np.zeros((3, 1)), TrainConfig(epochs=1, steps_per_epoch=1))

    def test_nan_loss_aborts(self):
        from diffcard.score import TrainingError

        m = ScoreModel(S, 1)
        m.head.weights[-1][...] = np.nan
        with pytest.raises(TrainingError, match="head"):
            train(m, np.zeros((2, 1)), TrainConfig(epochs=1, steps_per_epoch=2, branches=(HEAD,)))


class TestSelectEpsilon:
    cands = (1 / 640, 1 / 320, 1 / 160)

    def test_first_accept(self):
        assert select_epsilon(None, self.cands, 1.0, probe=lambda e: 0.5) == 1 / 640

    def test_fallback(self):
        assert select_epsilon(None, self.cands, 1.0, probe=lambda e: 2.0) == 1 / 160

    def test_empty(self):
        with pytest.raises(ValueError):
            select_epsilon(None, [], 1.0, probe=lambda e: 0.0)

    def test_tightening_threshold(self):
        # probes on a fixed seed cloud; tighter thresholds can only select larger epsilon
        cloud = np.random.default_rng(5).standard_normal((200, 2)) * 0.5
        from diffcard.score import probe_loss

        losses = {e: probe_loss(cloud, e, steps=60, n_eval=256) for e in self.cands}
        picks = [select_epsilon(cloud, self.cands, th, probe=losses.__getitem__) for th in (10.0, 1.0, 0.5, 0.2, 0.0)]
        assert all(a <= b for a, b in zip(picks, picks[1:]))
        assert picks[-1] == 1 / 160


class TestTrainedDensity:
    def test_single_point_peak(self):
        import math

        from diffcard.density import log_density

        m = ScoreModel(S, 1, seed=0)
        m, _ = train(m, np.zeros((1, 1)), TrainConfig(epochs=10, steps_per_epoch=200))
        peak = -0.5 * math.log(2 * math.pi * float(S.sigma2(S.epsilon)))
        assert abs(log_density(m, [0.0]) - peak) < 0.15

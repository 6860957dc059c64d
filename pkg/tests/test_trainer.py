"""Tests for the training loops."""

import math

import numpy as np
import pytest
import torch

from app.core.config import TrainConfig
from app.core.exceptions import DomainError, TrainingDivergedError
from app.models.physics import AtomSystem, GateKind
from app.models.schemas import EvalReport, FitModel, ProgressRecord, TrainRunSummary, TrainStatus
from app.services import trainer
from app.services.ansatz import ChainedNetwork, Interval, PulseFamily
from app.services.evaluation import fit_times
from app.services.fidelity import decompose_batch, infidelity_decomposition
from app.services.trainer import (
    PROGRESS_NAME,
    STAGE_REPORT_NAME,
    SUMMARY_NAME,
    batch_cost,
    fixed_angle_optimize,
    resolve_intervals,
    sample_angles,
    train_family,
    train_interval,
    training_model,
    two_stage_blockade,
)
from app.services.weights_io import MANIFEST_NAME, interval_filename, load_family
from app.utils.helpers import read_jsonl
from app.utils.units import gamma_from_lifetime

STEPS = 16


def _params(net: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {name: p.detach().clone() for name, p in net.named_parameters()}


class TestSampling:
    """Test cases for angle sampling."""

    def test_within_interval(self, upper_half: Interval):
        """Test that sampled angles lie in the half-open interval."""
        phis = sample_angles(upper_half, 500, np.random.default_rng(0))
        assert phis.dtype == torch.float64
        assert torch.all(phis > upper_half.low) and torch.all(phis <= upper_half.high)

    def test_reproducible(self, upper_half: Interval):
        """Test that equal generator seeds give equal angles."""
        a = sample_angles(upper_half, 10, np.random.default_rng(4))
        b = sample_angles(upper_half, 10, np.random.default_rng(4))
        torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_rejects_empty_batch(self, upper_half: Interval):
        """Test that an empty batch is rejected."""
        with pytest.raises(ValueError):
            sample_angles(upper_half, 0, np.random.default_rng(0))

    def test_default_partition(self):
        """Test the default interval counts per gate."""
        assert len(resolve_intervals(GateKind.C1P, TrainConfig())) == 5
        assert len(resolve_intervals(GateKind.C2P, TrainConfig())) == 14

    def test_explicit_partition(self):
        """Test that an explicit partition is sorted into intervals."""
        cfg = TrainConfig(intervals=[(1.0, math.pi), (0.0, 1.0)])
        assert resolve_intervals(GateKind.C1P, cfg) == [Interval(0.0, 1.0), Interval(1.0, math.pi)]


class TestBatchCost:
    """Test cases for the differentiable training cost."""

    def test_gradient_matches_finite_differences(self, tiny_net: ChainedNetwork, two_atoms: AtomSystem):
        """Test that the gradient of J_opt over every layer matches central differences."""
        model = training_model(GateKind.C1P, two_atoms.with_overrides(gamma=1e-3))
        phis = torch.tensor([0.8, 2.1, 3.0], dtype=torch.float64)

        def cost() -> torch.Tensor:
            return batch_cost(tiny_net, phis, GateKind.C1P, model, mu=1e-3, n_steps=STEPS)[1]

        tiny_net.zero_grad()
        cost().backward()
        params = dict(tiny_net.named_parameters())

        def strongest(name: str, column: int | None = None) -> tuple[int, ...]:
            grad = params[name].grad.abs()
            if column is not None:
                return (int(grad[:, column].argmax()), column)
            return tuple(int(i) for i in np.unravel_index(int(grad.argmax()), grad.shape))

        entries = [
            ("n_t.layers.2.bias", (0,)),
            ("n_c.layers.2.bias", (0,)),
            ("n_c.layers.2.bias", (6,)),
            # Input layer of N_T: reaches the cost through the duration and N_C's second input.
            ("n_t.layers.0.weight", strongest("n_t.layers.0.weight")),
            ("n_t.layers.0.bias", strongest("n_t.layers.0.bias")),
            # Column 1 of N_C's input layer multiplies the normalized duration.
            ("n_c.layers.0.weight", strongest("n_c.layers.0.weight", column=1)),
            ("n_c.layers.0.weight", strongest("n_c.layers.0.weight", column=0)),
            ("n_c.layers.2.weight", strongest("n_c.layers.2.weight")),
            ("n_t.layers.2.weight", strongest("n_t.layers.2.weight")),
        ]
        assert float(params["n_t.layers.0.weight"].grad.abs().max()) > 0.0
        assert float(params["n_c.layers.0.weight"].grad[:, 1].abs().max()) > 0.0

        step = 1e-6
        for name, index in entries:
            param = params[name]
            analytic = float(param.grad[index])
            with torch.no_grad():
                param[index] += step
                plus = float(cost())
                param[index] -= 2 * step
                minus = float(cost())
                param[index] += step
            numeric = (plus - minus) / (2 * step)
            assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-9), f"{name}{index}"

    def test_penalty_adds_mean_duration(self, tiny_net: ChainedNetwork, c1p_model):
        """Test that the penalized cost adds mu times the mean duration."""
        phis = torch.tensor([1.0, 2.0], dtype=torch.float64)
        j, j_opt, batch = batch_cost(tiny_net, phis, GateKind.C1P, c1p_model, mu=0.01, n_steps=STEPS)
        assert float(j_opt) == pytest.approx(float(j) + 0.01 * float(batch.durations.mean()))
        assert 0.0 <= float(j) <= 1.0


class TestTrainInterval:
    """Test cases for a single-interval optimization."""

    def test_zero_learning_rate_keeps_weights(self, tiny_net, tiny_train_config, two_atoms, upper_half):
        """Test that a zero learning rate leaves the weights unchanged."""
        cfg = tiny_train_config.model_copy(update={"learning_rate": 0.0, "max_iters": 3})
        before = _params(tiny_net)
        train_interval(tiny_net, upper_half, cfg, two_atoms, GateKind.C1P, n_steps=STEPS)
        for name, value in _params(tiny_net).items():
            torch.testing.assert_close(value, before[name], rtol=0, atol=0)

    def test_deterministic(self, tiny_train_config, two_atoms, upper_half):
        """Test that equal seeds give equal training traces."""
        runs = []
        for _ in range(2):
            net = ChainedNetwork(tiny_train_config.arch, t_bound=9.0, n_knots=6, seed=5)
            rng = np.random.default_rng(9)
            runs.append(train_interval(net, upper_half, tiny_train_config, two_atoms, GateKind.C1P, rng=rng, n_steps=STEPS))
        assert runs[0].losses == runs[1].losses

    def test_progress_log(self, tmp_path, tiny_net, tiny_train_config, two_atoms, upper_half):
        """Test that every logged iteration lands in the progress file."""
        path = tmp_path / PROGRESS_NAME
        result = train_interval(
            tiny_net, upper_half, tiny_train_config, two_atoms, GateKind.C1P, progress_path=path, n_steps=STEPS
        )
        records = [ProgressRecord.model_validate(line) for line in read_jsonl(path)]
        assert records == result.trace
        first = records[0]
        assert first.iter == 1 and first.stage == "main"
        assert result.iterations <= tiny_train_config.max_iters
        assert result.status in (TrainStatus.CONVERGED, TrainStatus.MAX_ITERS)

    def test_resume_continues_run(self, tmp_path, tiny_train_config, two_atoms, upper_half):
        """Test that a resumed run continues from its checkpoint."""
        checkpoint = tmp_path / "interval.ckpt"
        cfg = tiny_train_config.model_copy(update={"plateau_window": 10})

        straight_net = ChainedNetwork(cfg.arch, t_bound=9.0, n_knots=6, seed=5)
        straight = train_interval(
            straight_net, upper_half, cfg, two_atoms, GateKind.C1P, rng=np.random.default_rng(1), n_steps=STEPS
        )

        first_net = ChainedNetwork(cfg.arch, t_bound=9.0, n_knots=6, seed=5)
        train_interval(
            first_net,
            upper_half,
            cfg.model_copy(update={"max_iters": 2}),
            two_atoms,
            GateKind.C1P,
            rng=np.random.default_rng(1),
            checkpoint_path=checkpoint,
            n_steps=STEPS,
        )
        assert checkpoint.exists()

        resumed_net = ChainedNetwork(cfg.arch, t_bound=9.0, n_knots=6, seed=99)
        resumed = train_interval(
            resumed_net,
            upper_half,
            cfg,
            two_atoms,
            GateKind.C1P,
            rng=np.random.default_rng(12345),
            checkpoint_path=checkpoint,
            resume=True,
            n_steps=STEPS,
        )
        assert resumed.iterations == cfg.max_iters
        np.testing.assert_allclose(resumed.losses, straight.losses, rtol=1e-12)

    def test_divergence_raises_after_retries(self, monkeypatch, tiny_net, tiny_train_config, two_atoms, upper_half):
        """Test that repeated non-finite costs abort training."""
        real = trainer.batch_cost

        def poisoned(*args, **kwargs):
            j, j_opt, batch = real(*args, **kwargs)
            return j, j_opt * float("nan"), batch

        monkeypatch.setattr(trainer, "batch_cost", poisoned)
        before = _params(tiny_net)
        cfg = tiny_train_config.model_copy(update={"divergence_retries": 1})
        with pytest.raises(TrainingDivergedError) as excinfo:
            train_interval(tiny_net, upper_half, cfg, two_atoms, GateKind.C1P, n_steps=STEPS)
        assert excinfo.value.details == {"last_good_iteration": 0}
        for name, value in _params(tiny_net).items():
            torch.testing.assert_close(value, before[name], rtol=0, atol=0)


class TestTrainFamily:
    """Test cases for interval-by-interval family training."""

    def test_writes_family(self, tmp_path, tiny_train_config, two_atoms):
        """Test that a trained family is written with its manifest."""
        run = train_family(GateKind.C1P, tiny_train_config, two_atoms, tmp_path, n_steps=STEPS)
        out = tmp_path / "main"
        assert len(run.results) == 2
        assert len(run.stage_log) == 3
        assert (out / MANIFEST_NAME).exists()
        assert (out / SUMMARY_NAME).exists()
        assert (out / PROGRESS_NAME).exists()
        family = load_family(out)
        assert family.intervals == run.family.intervals
        assert run.summary().converged == run.converged

    def test_resume_skips_finished_intervals(self, tmp_path, tiny_train_config, two_atoms):
        """Test that resuming reloads finished intervals."""
        first = train_family(GateKind.C1P, tiny_train_config, two_atoms, tmp_path, n_steps=STEPS)
        again = train_family(GateKind.C1P, tiny_train_config, two_atoms, tmp_path, resume=True, n_steps=STEPS)
        assert sum("loaded from previous run" in line for line in again.stage_log) == 2
        for old, new in zip(first.results, again.results):
            assert new.iterations == old.iterations
            for (name, a), b in zip(old.net.state_dict().items(), new.net.state_dict().values()):
                torch.testing.assert_close(a, b, rtol=0, atol=0, msg=name)

    def test_warm_start_from_pi_side(self, monkeypatch, tiny_train_config, two_atoms):
        """Test that intervals are trained from pi downwards."""
        order = []
        real = trainer.train_interval

        def recording(net, interval, *args, **kwargs):
            order.append(interval)
            return real(net, interval, *args, **kwargs)

        monkeypatch.setattr(trainer, "train_interval", recording)
        train_family(GateKind.C1P, tiny_train_config, two_atoms, n_steps=STEPS)
        assert order[0].high == pytest.approx(math.pi)
        assert order[1].low == 0.0

    def test_returns_covering_family(self, tiny_train_config, two_atoms):
        """Test that a run yields a family covering (0, pi]."""
        run = train_family(GateKind.C1P, tiny_train_config, two_atoms, n_steps=STEPS)
        family = run.family
        assert isinstance(family, PulseFamily)
        assert family.missing_intervals() == []


class TestTwoStage:
    """Test cases for the infinite-then-finite blockade curriculum."""

    def test_rejects_single_control(self, tiny_train_config, two_atoms):
        """Test that the curriculum needs a two-control gate."""
        with pytest.raises(DomainError):
            two_stage_blockade(GateKind.C1P, tiny_train_config, two_atoms)

    def test_runs_both_stages(self, tmp_path, tiny_train_config, three_atoms):
        """Test that both stages train and write their weights and summary."""
        cfg = tiny_train_config.model_copy(
            update={"n_intervals": 1, "max_iters": 2, "batch_m": 2, "stage_eval_samples": 3}
        )
        run = two_stage_blockade(GateKind.C2P, cfg, three_atoms, tmp_path, n_steps=STEPS)
        assert set(run.stages) == {"infinite", "finite"}
        assert (tmp_path / "infinite" / MANIFEST_NAME).exists()
        assert (tmp_path / "finite" / MANIFEST_NAME).exists()
        assert any(line.startswith("infinite:") for line in run.stage_log)
        assert any(line.startswith("finite:") for line in run.stage_log)
        assert (tmp_path / SUMMARY_NAME).exists()

    def test_reports_both_stages_at_finite_blockade(self, tmp_path, tiny_train_config, three_atoms):
        """Test that each stage family is decomposed at the finite blockade and written to disk."""
        cfg = tiny_train_config.model_copy(
            update={"n_intervals": 1, "max_iters": 2, "batch_m": 2, "stage_eval_samples": 3, "eval_b": 30.0}
        )
        run = two_stage_blockade(GateKind.C2P, cfg, three_atoms, tmp_path, n_steps=STEPS)

        assert set(run.stage_reports) == {"infinite", "finite"}
        for stage, report in run.stage_reports.items():
            assert report.blockade_b == 30.0
            assert report.n_samples == 3
            on_disk = EvalReport.model_validate_json((tmp_path / STAGE_REPORT_NAME.format(stage)).read_text())
            assert on_disk.mean_infid_blockade == pytest.approx(report.mean_infid_blockade)

        summary = TrainRunSummary.model_validate_json((tmp_path / SUMMARY_NAME).read_text())
        assert set(summary.stage_evaluations) == {"infinite", "finite"}
        assert summary.stage_evaluations["finite"].report == STAGE_REPORT_NAME.format("finite")
        assert any(line.startswith("curriculum at B=30.0") for line in run.stage_log)


class TestFixedAngle:
    """Test cases for direct single-angle optimization."""

    def test_rejects_out_of_domain(self, tiny_train_config, two_atoms):
        """Test that angles outside (0, pi] are rejected."""
        with pytest.raises(DomainError):
            fixed_angle_optimize(GateKind.C1P, 4.0, tiny_train_config, two_atoms)

    def test_short_run(self, tiny_train_config, two_atoms):
        """Test the result of a short single-angle run."""
        result = fixed_angle_optimize(GateKind.C1P, 2.0, tiny_train_config, two_atoms, n_steps=STEPS)
        assert result.pulse.phi == pytest.approx(2.0)
        assert result.pulse.knots.shape == (6,)
        assert 0.0 <= result.report.infid_total <= 1.0
        assert result.fidelity == pytest.approx(1.0 - result.report.infid_total)

    def test_time_penalty_shortens_pulse(self, tiny_train_config, two_atoms):
        """Test that a strong time penalty shortens the pulse."""
        cfg = tiny_train_config.model_copy(
            update={"mu": 10.0, "mu_switch": 1.0, "max_iters": 30, "learning_rate": 0.05, "plateau_window": 50}
        )
        result = fixed_angle_optimize(GateKind.C1P, math.pi, cfg, two_atoms, initial_duration=7.0, n_steps=STEPS)
        assert result.pulse.duration < 7.0

    @pytest.mark.slow
    def test_reaches_time_optimal_controlled_z(self):
        """Test that C_1Z at B = 21.1 reaches 1 - F < 1e-4 near T = 7.612 and stays below 1e-3 with decay."""
        cfg = TrainConfig(learning_rate=1e-2, max_iters=4000, mu=1e-4, mu_switch=1e-4, n_knots=48, seed=0)
        result = fixed_angle_optimize(GateKind.C1P, math.pi, cfg, AtomSystem(n_atoms=2), initial_duration=8.0)
        assert result.report.infid_total < 1e-4
        assert result.pulse.duration == pytest.approx(7.612, rel=0.1)

        decayed = infidelity_decomposition(
            result.pulse, GateKind.C1P, AtomSystem(n_atoms=2, gamma=gamma_from_lifetime(96.5, 10.0))
        )
        assert 1e-4 < decayed.infid_total < 1e-3
        assert decayed.infid_decay > 0.0

    @pytest.mark.slow
    def test_blockade_curriculum_improves_controlled_controlled_z(self):
        """Test that a perfect-blockade C_2Z pulse refined at B = 21.1 beats its unrefined start."""
        cfg = TrainConfig(learning_rate=1e-2, max_iters=4000, mu=1e-4, mu_switch=1e-4, n_knots=48, seed=0)
        finite = AtomSystem(n_atoms=3)
        stage_one = fixed_angle_optimize(
            GateKind.C2P, math.pi, cfg, finite.with_overrides(blockade_b=math.inf), initial_duration=17.0
        )
        stage_two = fixed_angle_optimize(GateKind.C2P, math.pi, cfg, finite, initial=stage_one.pulse)
        unrefined = infidelity_decomposition(stage_one.pulse, GateKind.C2P, finite)

        assert unrefined.infid_blockade > 0.0
        assert unrefined.infid_total >= 10.0 * stage_two.report.infid_total
        assert stage_two.pulse.duration == pytest.approx(16.87, rel=0.1)


class TestFamilyQuality:
    """Test cases for a trained family on one interval."""

    @pytest.mark.slow
    def test_upper_half_family(self, upper_half: Interval):
        """Test that a network trained on (pi/2, pi] is accurate and smooth in the angle."""
        cfg = TrainConfig(learning_rate=3e-3, max_iters=3000, mu=1e-4, mu_switch=1e-4, seed=0)
        sys = AtomSystem(n_atoms=2)
        net = ChainedNetwork((3, 24, 6, 128), t_bound=1.2 * 7.612, n_knots=cfg.n_knots, delta_bound=cfg.delta_bound)
        train_interval(net, upper_half, cfg, sys, GateKind.C1P)

        phis = sample_angles(upper_half, 50, np.random.default_rng(123))
        with torch.no_grad():
            batch = net(phis)
        reports = decompose_batch(GateKind.C1P, phis, batch, sys).reports()
        fit = fit_times(phis.numpy(), batch.durations.detach().numpy(), FitModel.ARCSINH)

        assert np.mean([r.infid_total for r in reports]) < 1e-3
        assert fit.r_squared > 0.98

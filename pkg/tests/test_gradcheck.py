import numpy as np
import pytest

from platoon_gen.gradcheck import THRESHOLD, block_relative_error, run_gradcheck


class TestGradcheck:
    @pytest.mark.parametrize("feedback", [False, True])
    def test_passes(self, feedback):
        rep = run_gradcheck(trials=4, feedback_gradient=feedback, seed=5)
        assert rep.passed and rep.max_rel_error < THRESHOLD
        assert set(rep.per_block) == {"W0", "b0", "W1", "b1", "W2", "b2", "head_w", "head_b"}

    def test_fault_injection_fails(self):
        rep = run_gradcheck(trials=2, fault=1e-3)
        assert not rep.passed and rep.max_rel_error > THRESHOLD

    def test_report_lines(self):
        lines = run_gradcheck(trials=1).lines()
        assert "PASS" in lines[0] and len(lines) == 9
        assert any(line.strip().startswith("head_w") for line in lines)

    def test_relative_error(self):
        assert block_relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
        assert block_relative_error(np.array([1.0, -2.0]), np.array([1.0, -1.0])) == pytest.approx(0.5)
        assert block_relative_error(np.zeros(3), np.zeros(3)) == 0.0

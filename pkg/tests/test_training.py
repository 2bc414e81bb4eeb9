import dataclasses
import math

import numpy as np
import pytest
import torch

from apc.attribute_flow import SubspaceBank
from apc.config import TrainConfig
from apc.geometry import chamfer_l1
from apc.training import (
    evaluate,
    load_checkpoint,
    metric_rows,
    metric_table_csv,
    metric_table_text,
    orthogonality_loss,
    run_code_dim_sweep,
    save_checkpoint,
    total_loss,
    train,
)
from conftest import micro_model_config


def orthonormal_bank_f64(n_points, channels, code_dim):
    bank = SubspaceBank(n_points, channels, code_dim).double()
    with torch.no_grad():
        gauss = torch.randn(n_points * channels, code_dim, dtype=torch.float64)
        bank.basis.copy_(torch.linalg.qr(gauss).Q)
    return bank


def duplicated_column_bank():
    bank = SubspaceBank(n_points=2, channels=2, code_dim=2)
    with torch.no_grad():
        col = torch.full((4,), 0.5)  # unit column
        bank.basis.copy_(torch.stack([col, col], dim=1))
    return bank


class TestOrthogonalityLoss:
    def test_orthonormal_banks_zero(self):
        # float64: QR orthonormality residual sits at the dtype's noise floor
        torch.manual_seed(0)
        banks = [orthonormal_bank_f64(16, 8, 6) for _ in range(3)]
        assert float(orthogonality_loss(banks).detach()) <= 1e-6

    def test_duplicated_column_sqrt2(self):
        # gram [[1,1],[1,1]] -> ||gram - I||_F = sqrt(2) per stage
        bank = duplicated_column_bank()
        assert float(orthogonality_loss([bank]).detach()) == pytest.approx(math.sqrt(2), abs=1e-6)
        three = [duplicated_column_bank() for _ in range(3)]
        assert float(orthogonality_loss(three).detach()) == pytest.approx(3 * math.sqrt(2), abs=1e-6)

    def test_scaled_column_positive(self):
        torch.manual_seed(1)
        bank = SubspaceBank(16, 8, 4)
        with torch.no_grad():
            bank.basis[:, 0] *= 2.0
        assert float(orthogonality_loss([bank]).detach()) > 0.1

    def test_no_banks(self):
        assert float(orthogonality_loss([])) == 0.0

    def test_literal_form(self):
        # orthonormal bank: ||gram||_F = sqrt(d); literal = 3*sqrt(d) - 1
        torch.manual_seed(2)
        banks = [orthonormal_bank_f64(16, 8, 4) for _ in range(3)]
        expected = 3 * math.sqrt(4) - 1
        assert float(orthogonality_loss(banks, form="literal").detach()) == pytest.approx(expected, abs=1e-4)

    def test_unknown_form_rejected(self):
        with pytest.raises(ValueError, match="form"):
            orthogonality_loss([duplicated_column_bank()], form="banana")

    def test_gradient_flows(self):
        torch.manual_seed(3)
        bank = SubspaceBank(8, 4, 3)
        with torch.no_grad():
            bank.basis[:, 0] *= 1.5
        loss = orthogonality_loss([bank])
        loss.backward()
        assert torch.isfinite(bank.basis.grad).all()
        assert float(bank.basis.grad.abs().sum()) > 0


class TestTotalLoss:
    def test_perfect_output_orthonormal_banks(self):
        torch.manual_seed(4)
        pts = torch.randn(20, 3, dtype=torch.float64)
        banks = [orthonormal_bank_f64(16, 8, 4) for _ in range(3)]
        assert float(total_loss(pts, pts, banks, alpha=100.0).detach()) < 1e-5

    def test_alpha_zero_is_chamfer(self):
        torch.manual_seed(5)
        p, q = torch.randn(15, 3), torch.randn(18, 3)
        banks = [duplicated_column_bank()]
        assert float(total_loss(p, q, banks, alpha=0.0).detach()) == float(chamfer_l1(p, q))

    def test_alpha_100_hand_value(self):
        pts = torch.randn(10, 3)
        banks = [duplicated_column_bank() for _ in range(3)]
        got = float(total_loss(pts, pts, banks, alpha=100.0).detach())
        assert got == pytest.approx(100.0 * 3 * math.sqrt(2), rel=1e-5)

    def test_decomposition(self):
        torch.manual_seed(6)
        p, q = torch.randn(12, 3).double(), torch.randn(12, 3).double()
        banks = [duplicated_column_bank().double()]
        alpha = 7.5
        lhs = float(total_loss(p, q, banks, alpha).detach()) - float(total_loss(p, q, banks, 0.0).detach())
        rhs = alpha * float(orthogonality_loss(banks).detach())
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestTrainLoop:
    def test_loss_decreases(self, micro_dataset, micro_trained):
        _, history, _ = micro_trained
        assert history[-1]["train_loss"] < history[0]["train_loss"]
        assert len(history) == 3

    def test_seed_determinism(self, micro_dataset):
        tc = TrainConfig(epochs=2, batch_size=8, seed=3, code_dim=6)
        _, hist_a = train(micro_dataset, micro_model_config(), tc)
        _, hist_b = train(micro_dataset, micro_model_config(), tc)
        assert hist_a == hist_b

    def test_only_mlp_variant_trains(self, micro_dataset):
        tc = TrainConfig(epochs=1, batch_size=8, seed=1, variant="only_mlp", code_dim=6)
        model, history = train(micro_dataset, micro_model_config(), tc)
        assert model.config.variant == "only_mlp"
        assert model.banks() == []
        assert len(history) == 1

    def test_divergence_aborts(self, micro_dataset):
        tc = TrainConfig(epochs=4, batch_size=8, seed=2, lr=1e18, code_dim=6, cosine_decay=False)
        with pytest.raises(RuntimeError, match="diverged"):
            train(micro_dataset, micro_model_config(), tc)

    def test_code_dim_sweep_completes(self, micro_dataset):
        tc = TrainConfig(epochs=1, batch_size=8, seed=0)
        rows = run_code_dim_sweep(micro_dataset, micro_model_config(), tc, dims=(4, 8, 18, 32))
        assert [r["code_dim"] for r in rows] == [4, 8, 18, 32]
        assert all(np.isfinite(r["test_l1_cd"]) for r in rows)


class TestCheckpoint:
    def test_roundtrip_bytes_and_outputs(self, micro_trained, micro_dataset, tmp_path):
        model, history, tc = micro_trained
        p1 = tmp_path / "a.ckpt"
        save_checkpoint(p1, model, tc, epoch=2, history=history)
        loaded, meta = load_checkpoint(p1)
        assert meta["epoch"] == 2
        assert meta["train_config"] == tc
        assert meta["history"] == history

        p2 = tmp_path / "b.ckpt"
        save_checkpoint(p2, loaded, meta["train_config"], meta["epoch"], meta["history"])
        assert p1.read_bytes() == p2.read_bytes()

        from apc.training import SplitArrays

        split = SplitArrays(micro_dataset, "test")
        with torch.no_grad():
            out_a, _ = model(split.images[:2])
            out_b, _ = loaded(split.images[:2])
        assert torch.equal(out_a, out_b)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)


class TestEvaluate:
    def test_ground_truth_against_itself_zero(self):
        rows = metric_rows([0.0] * 6, ["chair", "chair", "table", "plane", "plane", "plane"])
        assert all(r["l1_cd"] == 0.0 for r in rows)

    def test_row_format(self, micro_trained, micro_dataset):
        model, _, tc = micro_trained
        rows = evaluate(model, micro_dataset, "test", "l1", tc)
        families = {r["family"] for r in rows}
        assert "average" in families
        assert len(rows) == len(families)
        assert rows[-1]["family"] == "average"
        text = metric_table_text(rows)
        assert "average" in text and "x100" in text
        csv = metric_table_csv(rows)
        assert csv.startswith("family,count,l1_cd")

    def test_l2_metric(self, micro_trained, micro_dataset):
        model, _, tc = micro_trained
        rows = evaluate(model, micro_dataset, "test", "l2", tc)
        assert all("l2_cd" in r for r in rows)

    def test_bad_metric(self, micro_trained, micro_dataset):
        model, _, tc = micro_trained
        with pytest.raises(ValueError, match="metric"):
            evaluate(model, micro_dataset, "test", "fancy", tc)

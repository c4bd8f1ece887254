import numpy as np
import pytest

from selhn.data import gen_synthetic, write_features
from selhn.errors import ConfigError, NumericalAbort
from selhn.graddiag import delta_s_per_anchor
from selhn.harness import (CSV_COLUMNS, parse_config, run_eval,
                           run_gradcheck, run_training)


def small_cfg(tmp_path, **over):
    base = {
        "n_items": "80", "val_items": "16", "batch": "16", "epochs": "2",
        "embed_dim": "8", "d_v": "12", "d_t": "12", "latent_dim": "4",
        "regions": "2", "words": "2", "out": str(tmp_path / "run"),
    }
    base.update({k: str(v) for k, v in over.items()})
    return parse_config(None, base)


class TestParseConfig:
    def test_defaults_carry_reference_hyperparameters(self):
        cfg = parse_config(None, {})
        assert cfg.margin == 0.2
        assert cfg.epsilon == 0.01
        assert cfg.lr == 0.0005
        assert cfg.loss == "selhn"

    def test_file_then_flag_precedence(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("margin = 0.5\nepochs = 3  # comment\n")
        cfg = parse_config(f, {"margin": "0.7"})
        assert cfg.margin == 0.7
        assert cfg.epochs == 3

    def test_unknown_key_named(self, tmp_path):
        f = tmp_path / "bad.cfg"
        f.write_text("margni = 0.5\n")
        with pytest.raises(ConfigError, match="margni"):
            parse_config(f, {})

    def test_invalid_margin_named(self):
        with pytest.raises(ConfigError, match="margin"):
            parse_config(None, {"margin": "-1"})

    def test_unparsable_value(self):
        with pytest.raises(ConfigError, match="epochs"):
            parse_config(None, {"epochs": "three"})

    def test_odd_embed_dim_with_mlp_rejected(self):
        with pytest.raises(ConfigError, match="even"):
            parse_config(None, {"embed_dim": "7"})


class TestRunTraining:
    def test_smoke_run_writes_all_outputs(self, tmp_path):
        cfg = small_cfg(tmp_path)
        res = run_training(cfg)
        text = res.metrics_path.read_text()
        lines = text.strip().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 1 + 2  # header + one row per epoch
        assert (res.out_dir / "config.resolved").exists()
        assert res.final_ckpt.exists()
        assert res.best_ckpt is not None and res.best_ckpt.exists()

    def test_selhn_branch_fractions_partition(self, tmp_path):
        cfg = small_cfg(tmp_path, loss="selhn")
        res = run_training(cfg)
        for row in res.rows:
            total = row["branch_fraction_triplet"] + row["branch_fraction_hn"]
            assert total == pytest.approx(1.0, abs=1e-12)

    def test_pure_runs_have_fixed_fractions(self, tmp_path):
        res_t = run_training(small_cfg(tmp_path / "a", loss="triplet"))
        assert all(r["branch_fraction_triplet"] == 1.0 for r in res_t.rows)
        res_h = run_training(small_cfg(tmp_path / "b", loss="hn"))
        assert all(r["branch_fraction_hn"] == 1.0 for r in res_h.rows)

    def test_byte_identical_metrics_for_same_seed(self, tmp_path):
        a = run_training(small_cfg(tmp_path / "a", seed=99))
        b = run_training(small_cfg(tmp_path / "b", seed=99))
        assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()

    def test_different_seed_changes_metrics(self, tmp_path):
        a = run_training(small_cfg(tmp_path / "a", seed=1))
        b = run_training(small_cfg(tmp_path / "b", seed=2))
        assert a.metrics_path.read_bytes() != b.metrics_path.read_bytes()

    def test_logged_delta_s_matches_diagnostics(self, tmp_path):
        """Epoch-mean delta-s in the CSV equals delta_s_per_anchor pooled
        over the same batches."""
        seen = {}

        def hook(info):
            seen.setdefault(info.epoch, []).append(
                delta_s_per_anchor(info.sim))

        cfg = small_cfg(tmp_path, loss="hn")
        res = run_training(cfg, step_hook=hook)
        for row in res.rows:
            per_epoch = seen[row["epoch"]]
            want_i2t = np.concatenate([d.i2t for d in per_epoch]).mean()
            want_t2i = np.concatenate([d.t2i for d in per_epoch]).mean()
            assert row["mean_delta_s_i2t"] == pytest.approx(want_i2t, abs=0)
            assert row["mean_delta_s_t2i"] == pytest.approx(want_t2i, abs=0)

    def test_step_logging(self, tmp_path):
        cfg = small_cfg(tmp_path, log_steps="true")
        res = run_training(cfg)
        # 80 train items sans 16 val = 64; batch 16 -> 4 steps/epoch
        assert len(res.rows) == 2 * (4 + 1)

    def test_nan_aborts_with_dump(self, tmp_path, monkeypatch):
        cfg = small_cfg(tmp_path)
        import selhn.harness as harness_mod
        real = harness_mod.loss_by_id

        def poisoned(loss_id):
            fn = real(loss_id)

            def wrapper(s, h):
                res = fn(s, h)
                res.value = float("nan")
                return res
            return wrapper

        monkeypatch.setattr(harness_mod, "loss_by_id", poisoned)
        with pytest.raises(NumericalAbort):
            run_training(cfg)
        dump = (tmp_path / "run" / "abort_dump.txt").read_text()
        assert "batch_indices" in dump and "delta_s" in dump

    def test_eval_split_too_small(self, tmp_path):
        cfg = small_cfg(tmp_path, val_items="9")
        with pytest.raises(ConfigError, match="R@10"):
            run_training(cfg)


class TestRunEval:
    def test_best_checkpoint_reproduces_logged_rsum(self, tmp_path):
        data_file = tmp_path / "ds.hnsf"
        cfg = small_cfg(tmp_path)
        write_features(data_file, gen_synthetic(cfg.synth_config()))
        cfg2 = small_cfg(tmp_path, data=str(data_file))
        res = run_training(cfg2)
        report = run_eval(res.best_ckpt, data_file, "val",
                          val_items=16, test_items=0)
        assert report.rsum == res.best_rsum

    def test_fresh_encoders_score_near_random_expectation(self, tmp_path):
        """rsum of an untrained model ~ sum of 100*K/n over directions/Ks."""
        cfg = small_cfg(tmp_path, n_items="100", val_items="100", epochs="1",
                        noise_sigma="0.5")
        data_file = tmp_path / "r.hnsf"
        write_features(data_file, gen_synthetic(cfg.synth_config()))
        from selhn.encoders import save_checkpoint, init_params
        ckpt = tmp_path / "fresh_ckpt"
        save_checkpoint(ckpt, [init_params(cfg.arch("img"), 5),
                               init_params(cfg.arch("txt"), 6)])
        report = run_eval(ckpt, data_file, "val", val_items=100, test_items=0)
        n = 100
        expect = 2 * sum(100.0 * k / n for k in (1, 5, 10))
        sigma = 2 * sum(100.0 * np.sqrt((k / n) * (1 - k / n) / n)
                        for k in (1, 5, 10))
        assert abs(report.rsum - expect) <= 3 * sigma

    def test_dim_mismatch_names_both_shapes(self, tmp_path):
        cfg = small_cfg(tmp_path)
        res = run_training(cfg)
        other = gen_synthetic(parse_config(None, {"d_v": "9", "d_t": "9",
                                                  "n_items": "30"}).synth_config())
        bad_file = tmp_path / "bad.hnsf"
        write_features(bad_file, other)
        with pytest.raises(ConfigError, match=r"\(12, 12\).*\(9, 9\)"):
            run_eval(res.final_ckpt, bad_file, "all", val_items=0, test_items=0)


class TestRunGradcheck:
    def test_small_report_passes(self):
        report = run_gradcheck(seeds=2, base_seed=42)
        assert len(report.rows) == 15
        assert report.passed, str(report)

    def test_corrupted_gradient_fails_its_rows(self):
        report = run_gradcheck(seeds=1, base_seed=42, corrupt_loss="sct")
        bad = [r for r in report.rows if r.loss_id == "sct"]
        good = [r for r in report.rows if r.loss_id != "sct"]
        assert all(not r.passed for r in bad)
        assert all(r.passed for r in good)

    def test_deterministic(self):
        a = run_gradcheck(seeds=1, base_seed=7)
        b = run_gradcheck(seeds=1, base_seed=7)
        assert [r.max_rel_error for r in a.rows] == \
            [r.max_rel_error for r in b.rows]

import math

import numpy as np
import pytest

import efl


def test_version_and_stages():
    assert efl.__version__.startswith("efl-")
    assert efl.STAGES[0] == "synthesize" and efl.STAGES[-1] == "evaluate"


def test_schedule_is_decreasing():
    s = efl.noise_schedule()
    ab = np.array(s["alpha_bars"])
    assert len(ab) == 1000
    assert np.all(np.diff(ab) < 0)
    # alpha_bar[t] = prod(1 - beta), computed independently.
    betas = np.linspace(1e-4, 0.02, 1000)
    assert np.allclose(ab, np.cumprod(1 - betas), rtol=1e-12)


def test_inference_timesteps_span_the_chain():
    ts = efl.inference_timesteps(100)
    assert ts[0] == 999 and ts[-1] == 0 and len(ts) == 100


def test_cfg_probe_and_collapse():
    out = efl.cfg_combine(np.zeros(1), np.ones(1), np.full(1, 2.0))
    assert out[0] == 9.0
    rng = np.random.default_rng(0)
    a, b, c = (rng.normal(size=(4, 3, 3)) for _ in range(3))
    assert np.array_equal(efl.cfg_combine(a, b, c, 1.0, 1.0), c)


def test_attention_matches_numpy():
    rng = np.random.default_rng(1)
    q, k, v = rng.normal(size=(5, 6)), rng.normal(size=(7, 6)), rng.normal(size=(7, 3))
    s = q @ k.T / math.sqrt(6)
    w = np.exp(s - s.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    assert np.allclose(efl.attention(q, k, v), w @ v, atol=1e-12)


def test_conditioning_rows():
    assert efl.conditioning_rows("desc_plus_joint") == 80
    assert efl.conditioning_rows("labels_only") == 32
    with pytest.raises(efl.EflError) as e:
        efl.conditioning_rows("everything")
    assert e.value.exit_code == 2


def test_psnr_and_fid():
    a = np.full((3, 4, 4), 0.5)
    assert efl.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(500, 4)).tolist()
    assert efl.fid(x, x) < 1e-6


def test_bins_balanced():
    r = efl.transition_time_bins(list(np.linspace(0.3, 3.0, 101)), 4)
    assert max(r["counts"]) - min(r["counts"]) <= 1


def test_missing_prerequisite(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"work_dir = {tmp_path / 'work'}\n")
    with pytest.raises(efl.EflError) as e:
        efl.run_stage("train-vllm", str(cfg))
    assert e.value.exit_code == 3
    assert "efl curate" in str(e.value)


def test_first_stages_run(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"work_dir = {tmp_path / 'work'}\nn_instances = 40\n")
    logs = efl.run_pipeline(str(cfg), stages=["synthesize", "preprocess", "curate"])
    assert "40 instances" in logs["synthesize"]
    assert (tmp_path / "work" / "curate" / "descriptions.jsonl").exists()

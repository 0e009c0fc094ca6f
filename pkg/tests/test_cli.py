import numpy as np
import pytest

from seec import cli, container, maskio
from seec.maskio import MaskMap

from conftest import TINY, natural_like
from test_maskio import blob_mask


@pytest.fixture()
def workdir(tmp_path, tiny_model):
    rng = np.random.default_rng(0)
    tiny_model.save(tmp_path / "w.ckpt")
    for i, (H, W) in enumerate([(24, 30), (17, 16)]):
        maskio.write_ppm(tmp_path / f"img{i}.ppm", natural_like(rng, H, W))
        ids = np.zeros((H, W), dtype=np.uint8)
        ids[:, W // 2 :] = 1
        maskio.save_mask(tmp_path / f"img{i}.pgm", MaskMap(ids, 2))
    return tmp_path


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def _kv(line):
    return {k: float(v) for k, v in (tok.split("=") for tok in line.split())}


def test_encode_decode_round_trip(workdir, capsys):
    w = workdir / "w.ckpt"
    code, out, _ = run(capsys, "encode", workdir / "img0.ppm", workdir / "img0.pgm", "--weights", w, "--out", workdir / "a.seec")
    assert code == 0
    stats = _kv(out.strip())
    assert set(stats) == {"bpp_total", "bpp_latent", "bpp_mask", "bpp_pixel", "seconds"}
    size = (workdir / "a.seec").stat().st_size
    assert abs(stats["bpp_total"] * 24 * 30 / 8 - size) < 0.01
    code, out, _ = run(capsys, "decode", workdir / "a.seec", "--weights", w, "--out", workdir / "back.ppm",
                       "--mask-out", workdir / "back.pgm")
    assert code == 0
    assert (workdir / "back.ppm").read_bytes() == (workdir / "img0.ppm").read_bytes()
    assert out.strip() == "width=30 height=24 roi=0"
    np.testing.assert_array_equal(maskio.load_mask(workdir / "back.pgm").ids, maskio.load_mask(workdir / "img0.pgm").ids)


def test_roi_lowers_pixel_rate(workdir, capsys):
    args = ["encode", workdir / "img0.ppm", workdir / "img0.pgm", "--weights", workdir / "w.ckpt", "--out", workdir / "x.seec"]
    _, full, _ = run(capsys, *args)
    _, roi, _ = run(capsys, *args, "--roi")
    assert _kv(roi)["bpp_pixel"] < _kv(full)["bpp_pixel"]


def test_eval_table(workdir, capsys):
    (workdir / "lonely.ppm").write_bytes((workdir / "img1.ppm").read_bytes())
    code, out, err = run(capsys, "eval", workdir, "--weights", workdir / "w.ckpt", "--out", workdir / "t.csv")
    assert code == 0
    assert "lonely.ppm" in err
    lines = out.strip().splitlines()
    assert lines[0] == "image,bpp_total,bpp_latent,bpp_mask,bpp_pixel"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["img0", "img1", "mean"]
    rows = np.array([[float(v) for v in ln.split(",")[1:]] for ln in lines[1:3]])
    mean = np.array([float(v) for v in lines[3].split(",")[1:]])
    np.testing.assert_allclose(mean, rows.mean(axis=0), atol=2e-6)
    assert (workdir / "t.csv").read_text() == out
    # agrees with encode for the same image
    _, enc, _ = run(capsys, "encode", workdir / "img1.ppm", workdir / "img1.pgm", "--weights", workdir / "w.ckpt",
                    "--out", workdir / "y.seec")
    assert f"{_kv(enc)['bpp_total']:.6f}" == lines[2].split(",")[1]


def test_train_and_ablate(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    body = "".join(f"{k} = {v}\n" for k, v in TINY.items())
    cfg.write_text(body + "K = 2\nbatch_size = 2\npatch_size = 16\nepochs = 1\nsteps_per_epoch = 2\n"
                   "n_train = 4\nn_val = 2\nlog_every = 1\n")
    code, out, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "a.ckpt", "--seed", 3)
    assert code == 0 and "step=1" in err and out.startswith("best_val_bpp=")
    run(capsys, "train", "--config", cfg, "--out", tmp_path / "b.ckpt", "--seed", 3)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    code, out, _ = run(capsys, "ablate", "--config", cfg, "--arms", "smem_on_mcdlm_on,smem_off_mcdlm_off",
                       "--out", tmp_path / "r.csv")
    assert code == 0
    arms = {ln.split(",")[0] for ln in (tmp_path / "r.csv").read_text().splitlines()[1:]}
    assert arms == {"smem_on_mcdlm_on", "smem_off_mcdlm_off"}
    assert "bpp.smem_off_mcdlm_off.correct=" in out


# -- exit codes ---------------------------------------------------------------------------


def test_unknown_config_key_is_a_validation_error(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("learning_rate = 0.1\n")
    code, out, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "x.ckpt")
    assert code == 1 and out == "" and "unknown key" in err


def test_missing_input_is_an_io_error(workdir, capsys):
    code, _, _ = run(capsys, "encode", workdir / "nope.ppm", workdir / "img0.pgm", "--weights", workdir / "w.ckpt",
                     "--out", workdir / "x.seec")
    assert code == 2


def test_mismatched_mask_is_a_validation_error(workdir, capsys):
    code, _, err = run(capsys, "encode", workdir / "img0.ppm", workdir / "img1.pgm", "--weights", workdir / "w.ckpt",
                       "--out", workdir / "x.seec")
    assert code == 1 and "mask" in err


def test_corrupt_stream_is_a_validation_error(workdir, capsys):
    (workdir / "bad.seec").write_bytes(b"SEEC" + bytes(10))
    code, _, _ = run(capsys, "decode", workdir / "bad.seec", "--weights", workdir / "w.ckpt", "--out", workdir / "o.ppm")
    assert code == 1


def test_missing_required_flags(workdir, capsys):
    assert run(capsys, "encode", workdir / "img0.ppm", workdir / "img0.pgm", "--out", workdir / "x.seec")[0] == 1
    assert run(capsys, "decode", workdir / "x.seec", "--weights", workdir / "w.ckpt")[0] == 1
    assert run(capsys, "bogus")[0] == 1


def test_internal_errors_map_to_exit_3(workdir, capsys, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("unexpected")

    monkeypatch.setattr(container, "encode_image", boom)
    code, _, err = run(capsys, "encode", workdir / "img0.ppm", workdir / "img0.pgm", "--weights", workdir / "w.ckpt",
                       "--out", workdir / "x.seec")
    assert code == 3 and "internal error" in err

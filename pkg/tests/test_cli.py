import numpy as np
import pytest

from cpisim.cli import main
from cpisim.correlation import accumulate_stream, finalize, load_tensor
from cpisim.frames import read_stream
from cpisim.runconfig import parse_config

CONFIG = """
[optics]
s_o_mm = 100.0
magnification = -2.0
lens_magnification = 0.5
n_paths = 1
pitch_a_um = 10.0
pitch_b_um = 20.0
width_a = 16
height_a = 16
width_b = 8
height_b = 8

[speckle]
width = 16
height = 16
pitch_um = 20.0
sigma_c_um = 25.0
mean_intensity = 2.0

[detector]
mode = analog

[run]
frames = 12
seed = 7

[mask:slits]
type = double-slit
depth_mm = 120.0
pitch_um = 6.0
grid_width = 64
grid_height = 64
center_distance_um = 60.0
slit_width_um = 30.0
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(CONFIG)
    return path


def read_report(path):
    out = {}
    for line in path.read_text().splitlines():
        key, _, value = line.partition("=")
        out[key] = value
    return out


class TestParseConfig:
    def test_round_trip_fields(self, config_path):
        rc = parse_config(config_path)
        assert rc.optics.dims_a == (16, 16)
        assert rc.optics.M == -2.0
        assert rc.n_frames == 12
        assert rc.seed == 7
        assert len(rc.scene.masks) == 1
        assert not rc.binary

    def test_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text(CONFIG.replace("sigma_c_um", "sigma_typo_um"))
        with pytest.raises(Exception, match="unknown key"):
            parse_config(bad)

    def test_unknown_section_rejected(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text(CONFIG + "\n[extras]\nfoo = 1\n")
        with pytest.raises(Exception, match="unknown section"):
            parse_config(bad)

    def test_mask_required(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text(CONFIG.split("[mask:slits]")[0])
        with pytest.raises(Exception, match="mask"):
            parse_config(bad)


class TestSimulate:
    def test_writes_frames_and_manifest(self, config_path, tmp_path):
        out = tmp_path / "run"
        assert main(["simulate", str(config_path), "--out", str(out)]) == 0
        stream = read_stream(out)
        assert len(stream) == 12
        assert (out / "simulate_report.txt").exists()

    def test_zero_frames_manifest_only(self, config_path, tmp_path):
        out = tmp_path / "run0"
        assert main(["simulate", str(config_path), "--frames", "0",
                     "--out", str(out)]) == 0
        assert (out / "manifest.json").exists()
        assert not (out / "frames_a.cpif").exists()

    def test_rerun_byte_identical(self, config_path, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        main(["simulate", str(config_path), "--out", str(out1)])
        main(["simulate", str(config_path), "--out", str(out2)])
        for name in ("frames_a.cpif", "frames_b.cpif", "manifest.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_binary_flag(self, config_path, tmp_path):
        out = tmp_path / "runb"
        assert main(["simulate", str(config_path), "--binary", "--frames", "4",
                     "--out", str(out)]) == 0
        stream = read_stream(out)
        assert stream.frames_a[0].is_binary


class TestCorrelateRefocus:
    @pytest.fixture
    def frames_dir(self, config_path, tmp_path):
        out = tmp_path / "frames"
        main(["simulate", str(config_path), "--frames", "40", "--out", str(out)])
        return out

    def test_correlate_matches_library(self, frames_dir, tmp_path):
        gamma_path = tmp_path / "gamma.cpig"
        assert main(["correlate", str(frames_dir), "--out", str(gamma_path)]) == 0
        tensor = load_tensor(gamma_path)
        lib = finalize(accumulate_stream(read_stream(frames_dir)))
        assert np.array_equal(tensor.data, lib.data)

    def test_correlate_with_binning(self, frames_dir, tmp_path):
        gamma_path = tmp_path / "gamma2.cpig"
        assert main(["correlate", str(frames_dir), "--binning", "2",
                     "--out", str(gamma_path)]) == 0
        assert load_tensor(gamma_path).dims_b == (4, 4)

    def test_missing_dir_is_runtime_error(self, tmp_path):
        code = main(["correlate", str(tmp_path / "nope"), "--out",
                     str(tmp_path / "g.cpig")])
        assert code == 3

    def test_refocus_writes_images_and_report(self, frames_dir, config_path, tmp_path):
        gamma_path = tmp_path / "gamma.cpig"
        main(["correlate", str(frames_dir), "--out", str(gamma_path)])
        out = tmp_path / "refocus"
        assert main(["refocus", str(gamma_path), "--config", str(config_path),
                     "--stack", "110..130:3", "--out", str(out)]) == 0
        report = read_report(out / "refocus_report.txt")
        assert report["n_depths"] == "3"
        assert (out / "refocus_120mm.cpif").exists()

    def test_refocus_requires_depth_or_stack(self, frames_dir, config_path, tmp_path):
        gamma_path = tmp_path / "gamma.cpig"
        main(["correlate", str(frames_dir), "--out", str(gamma_path)])
        code = main(["refocus", str(gamma_path), "--config", str(config_path),
                     "--out", str(tmp_path / "x")])
        assert code == 2


class TestMetricsCommand:
    def test_self_reference_r_is_one(self, config_path, tmp_path):
        out = tmp_path / "frames"
        main(["simulate", str(config_path), "--frames", "6", "--out", str(out)])
        report_path = tmp_path / "metrics.txt"
        assert main(["metrics", str(out / "frames_a.cpif"),
                     "--reference", str(out / "frames_a.cpif"),
                     "--out", str(report_path)]) == 0
        report = read_report(report_path)
        assert float(report["pearson_r"]) == pytest.approx(1.0)


class TestUsageErrors:
    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag(self):
        assert main(["correlate"]) == 1

    def test_validation_exit_code(self, config_path, tmp_path):
        out = tmp_path / "frames"
        main(["simulate", str(config_path), "--frames", "4", "--out", str(out)])
        code = main(["cs", str(out), "--config", str(config_path),
                     "--fraction", "2.0", "--depth", "120", "--out",
                     str(tmp_path / "cs")])
        assert code == 2


class TestCsAndTomoCommands:
    def test_cs_command_smoke(self, config_path, tmp_path):
        frames = tmp_path / "frames"
        main(["simulate", str(config_path), "--frames", "30", "--out", str(frames)])
        out = tmp_path / "cs"
        code = main(["cs", str(frames), "--config", str(config_path),
                     "--fraction", "0.5", "--depth", "120", "--lambda", "0.001",
                     "--max-rows", "400", "--out", str(out)])
        assert code == 0
        report = read_report(out / "cs_report.txt")
        assert "r_red" in report and "r_cs" in report
        assert (out / "cs_image.cpif").exists()

    def test_tomo_command_smoke(self, config_path, tmp_path):
        frames = tmp_path / "frames"
        main(["simulate", str(config_path), "--frames", "60", "--out", str(frames)])
        gamma_path = tmp_path / "g.cpig"
        main(["correlate", str(frames), "--out", str(gamma_path)])
        # object-free reference from a transparent mask
        ref_cfg = tmp_path / "ref.cfg"
        ref_cfg.write_text(CONFIG.replace("type = double-slit", "type = uniform")
                           .replace("center_distance_um = 60.0", "")
                           .replace("slit_width_um = 30.0", "value = 1.0")
                           .replace("grid_width = 64", "grid_width = 96")
                           .replace("grid_height = 64", "grid_height = 96"))
        ref_frames = tmp_path / "ref_frames"
        main(["simulate", str(ref_cfg), "--frames", "60", "--out", str(ref_frames)])
        ref_gamma = tmp_path / "ref.cpig"
        main(["correlate", str(ref_frames), "--out", str(ref_gamma)])
        out = tmp_path / "tomo"
        code = main(["tomo", str(gamma_path), "--ref", str(ref_gamma),
                     "--config", str(config_path),
                     "--grid", "8,8,4,30,10,115", "--solver", "mlem",
                     "--iters", "5", "--out", str(out)])
        assert code == 0
        assert (out / "volume.cpiv").exists()
        report = read_report(out / "tomo_report.txt")
        assert report["solver"] == "mlem"

    def test_bench_command(self, config_path, tmp_path):
        frames = tmp_path / "framesb"
        main(["simulate", str(config_path), "--binary", "--frames", "1024",
              "--out", str(frames)])
        report_path = tmp_path / "bench.txt"
        code = main(["bench", str(frames), "--mode", "both",
                     "--out", str(report_path)])
        assert code == 0
        report = read_report(report_path)
        assert report["tensors_identical"] == "True"
        assert float(report["speedup"]) > 0

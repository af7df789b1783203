import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from muwarm.experiments import Lab, RunSpec
from muwarm.metrics import default_sigma, gaussian_kernel
from muwarm.model import ModelConfig
from muwarm.parameterization import Scheme
from muwarm.report import _log_ticks, _nice_ticks, collect_runs, smoothed_curve, write_report
from muwarm.train import TrainConfig
from muwarm.warmstart import WarmstartConfig

SCHEME = Scheme("muP", base_width=32, sigma0=0.2, zero_readout=True)


@pytest.fixture(scope="module")
def lab_dir(tmp_path_factory, small_corpus):
    d = tmp_path_factory.mktemp("lab")
    lab = Lab(d, small_corpus, block_size=16, eval_batch=4, eval_tokens=256)
    cfg = lab.config(32)
    base = lab.run(RunSpec(cfg, SCHEME, TrainConfig(2**-6, 4, max_tokens=20 * 64, eval_interval=2), label="base"))
    ws = RunSpec(lab.config(64), SCHEME, TrainConfig(2**-6, 4, max_tokens=10 * 64, eval_interval=2),
                 start_cursor=base.summary["cursor_end"], warmstart=WarmstartConfig(0.4), base_run=base.run_id,
                 label="ws")
    lab.run(ws)
    return d


def svg_files(rep):
    return [f for f in rep.files if f.endswith(".svg")]


class TestReport:
    def test_empty_run_set(self, tmp_path):
        rep = write_report(tmp_path)
        md = open(rep.index).read()
        assert "0 runs, 0 absent" in md
        # header and separator only
        table = [l for l in md.splitlines() if l.startswith("|")]
        assert len(table) == 2
        for f in svg_files(rep):
            ET.parse(tmp_path / "report" / f)

    def test_byte_identical(self, lab_dir, tmp_path):
        a = write_report(lab_dir, dest=tmp_path / "a")
        b = write_report(lab_dir, dest=tmp_path / "b")
        assert a.files == b.files
        for f in a.files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_missing_run_listed(self, lab_dir, tmp_path):
        present, _ = collect_runs(lab_dir)
        rep = write_report(lab_dir, run_ids=[present[0].run_id, "0123456789abcdef"], dest=tmp_path)
        assert rep.absent == ["0123456789abcdef"]
        assert rep.present == [present[0].run_id]
        assert "- 0123456789abcdef" in open(rep.index).read()

    def test_table_rows(self, lab_dir, tmp_path):
        rep = write_report(lab_dir, dest=tmp_path)
        md = open(rep.index).read()
        rows = [l for l in md.splitlines() if l.startswith("| ") and "run |" not in l]
        assert len(rows) == 2
        ws_row = next(r for r in rows if "| ws |" in r)
        cells = [c.strip() for c in ws_row.strip("|").split("|")]
        assert cells[4] == "0.40" and cells[9] == str(10 * 64)

    def test_concat_view_adds_series(self, lab_dir, tmp_path):
        plain = write_report(lab_dir, dest=tmp_path / "p")
        cat = write_report(lab_dir, concat_base=True, dest=tmp_path / "c")
        p = (tmp_path / "p" / "loss_vs_tokens.svg").read_text()
        c = (tmp_path / "c" / "loss_vs_tokens.svg").read_text()
        assert c.count("<polyline") == p.count("<polyline") + 1
        assert "ws +base" in c and plain.files == cat.files

    def test_coordcheck_panels(self, lab_dir, tmp_path):
        from muwarm.metrics import CoordCheckResult

        cc = CoordCheckResult([32, 64, 128], [0, 1], ["embed", "logits"],
                              norms={"embed": {0: [1.0, 1.0, 1.0], 1: [1.0, 1.1, 1.2]},
                                     "logits": {0: [0.0, 0.0, 0.0], 1: [0.1, 0.2, 0.4]}},
                              slopes={"embed": {0: 0.0, 1: 0.13}, "logits": {0: math.nan, 1: 1.0}}, label="demo")
        (lab_dir / "coordcheck").mkdir(exist_ok=True)
        (lab_dir / "coordcheck" / "demo.json").write_text(json.dumps(cc.to_dict()))
        try:
            rep = write_report(lab_dir, dest=tmp_path)
            svg = (tmp_path / "coordcheck_demo.svg").read_text()
            ET.fromstring(svg)
            assert "step 1: slope +1.00" in svg and "step 0: slope nan" in svg
            assert "| demo | 1.000 | 0 |" in open(rep.index).read()
        finally:
            (lab_dir / "coordcheck" / "demo.json").unlink()


class TestSmoothedCurve:
    def test_endpoints_within_kernel_support(self, lab_dir):
        for run in collect_runs(lab_dir)[0]:
            xs, ys = smoothed_curve(run.records, "tokens")
            raw = [r["val_loss"] for r in run.records]
            r = len(gaussian_kernel(default_sigma(len(raw)))) // 2
            for end, window in ((ys[0], raw[: r + 1]), (ys[-1], raw[len(raw) - r - 1:])):
                assert min(window) - 1e-12 <= end <= max(window) + 1e-12
            assert xs == [rec["tokens"] for rec in run.records]

    def test_skips_missing_losses(self):
        recs = [{"tokens": 0, "val_loss": 3.0}, {"tokens": 1, "val_loss": None}, {"tokens": 2, "val_loss": 2.0}]
        xs, ys = smoothed_curve(recs, "tokens")
        assert xs == [0, 2]


class TestTicks:
    def test_nice(self):
        assert _nice_ticks(0, 10) == [0, 2, 4, 6, 8, 10]

    def test_log_decades(self):
        assert _log_ticks(1, 1000) == [1, 10, 100, 1000]

    def test_log_narrow_range_still_ticks(self):
        t = _log_ticks(32, 256)
        assert len(t) >= 3 and all(32 <= v <= 256 for v in t)
        assert np.all(np.diff(t) > 0)

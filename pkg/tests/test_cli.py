import io
import json

import pytest

from visiongrid import errors
from visiongrid.cli import (
    EXIT_CONFIG,
    EXIT_CONNECT,
    EXIT_JOB_FAILED,
    EXIT_OK,
    apply_overrides,
    main,
    save_results,
    submit_and_monitor,
)
from visiongrid.coordinator import CoordinatorService
from visiongrid.jobs import parse_job_config
from visiongrid.worker import Worker, WorkerProfile, default_context

from conftest import array_to_png, color_noise_image

SAMPLE = json.dumps({
    "exec": "classify",
    "maxim": 500,
    "config": [
        {"name": "ImageStitch", "path": "dropbox:/1/", "output": "/tmp/out",
         "params": {"warp": "plane"}},
        {"name": "classify", "path": "dropbox:/photos", "output": "/tmp/out",
         "params": {}},
        {"name": "features", "path": "dropbox:/photos", "output": "/tmp/out",
         "params": {"name": "hist"}},
    ],
})


class TestApplyOverrides:
    def test_exec_override(self):
        spec = parse_job_config(apply_overrides(SAMPLE, {"exec": "features"}))
        assert spec.exec == "features"

    def test_maxim_override(self):
        spec = parse_job_config(apply_overrides(SAMPLE, {"maxim": "42"}))
        assert spec.maxim == 42

    def test_nested_param_override(self):
        text = apply_overrides(SAMPLE, {"ImageStitch.params.warp": "translation"})
        spec = parse_job_config(text)
        assert spec.config_for("ImageStitch").params["warp"] == "translation"

    def test_path_override(self):
        text = apply_overrides(SAMPLE, {"classify.path": "dropbox:/other"})
        assert parse_job_config(text).config_for("classify").path == "dropbox:/other"

    def test_unknown_override_target(self):
        with pytest.raises(errors.VisionGridError):
            apply_overrides(SAMPLE, {"nonsense.path": "local:/x"})

    def test_invalid_result_rejected(self):
        with pytest.raises(errors.VisionGridError):
            apply_overrides(SAMPLE, {"exec": "transmogrify"})


@pytest.fixture
def cluster(storage_root):
    service = CoordinatorService(storage_root).start()
    context = default_context(storage_root)
    worker = Worker(WorkerProfile.create(["gpu", "cpu"], slots=2),
                    service.broker_address, service.relay_address,
                    context=context, poll_timeout=0.1)
    worker.start()
    # Two dropbox photos the configs point at.
    photos = service.resolver.dropbox_root / "photos"
    photos.mkdir(parents=True)
    for i in range(2):
        (photos / f"p{i}.png").write_bytes(
            array_to_png(color_noise_image((30, 90, 160), seed=i)))
    yield service
    worker.stop()
    service.stop()


class TestSubmitAndMonitor:
    def test_streams_lines_and_exits_zero(self, cluster):
        out = io.StringIO()
        err = io.StringIO()
        code, job_id = submit_and_monitor(cluster.http_url, SAMPLE,
                                          out=out, err=err)
        assert code == EXIT_OK
        assert job_id
        lines = [l for l in out.getvalue().splitlines() if l]
        assert len(lines) == 2  # one classification line per photo
        # Stdout carries the output_line payloads verbatim: compare against
        # the retained event log.
        import requests
        events = requests.get(f"{cluster.http_url}/api/v1/jobs/{job_id}",
                              timeout=10).json()["events"]
        payloads = [e["payload"] for e in events if e["type"] == "output_line"]
        assert sorted(lines) == sorted(payloads)

    def test_exec_override_switches_functionality(self, cluster):
        out = io.StringIO()
        config = apply_overrides(SAMPLE, {"exec": "features"})
        code, job_id = submit_and_monitor(cluster.http_url, config,
                                          out=out, err=io.StringIO())
        assert code == EXIT_OK
        import requests
        status = requests.get(f"{cluster.http_url}/api/v1/jobs/{job_id}?events=0",
                              timeout=10).json()
        assert status["functionality"] == "features"
        assert any(key.endswith(".ccvm") for key in status["artifacts"])

    def test_connection_error_exit_code(self):
        code, job_id = submit_and_monitor("http://127.0.0.1:1", SAMPLE,
                                          out=io.StringIO(), err=io.StringIO())
        assert code == EXIT_CONNECT and job_id is None

    def test_bad_config_rejected_server_side(self, cluster):
        bad = json.dumps({"exec": "classify", "config": []})
        code, _ = submit_and_monitor(cluster.http_url, bad,
                                     out=io.StringIO(), err=io.StringIO())
        assert code == EXIT_CONFIG

    def test_failed_job_exit_code(self, cluster):
        # An unknown feature backend fails at execution time, so the job
        # runs and ends in the failed state.
        config = apply_overrides(SAMPLE, {"exec": "features",
                                          "features.params.name": "nope"})
        code, _ = submit_and_monitor(cluster.http_url, config,
                                     out=io.StringIO(), err=io.StringIO())
        assert code == EXIT_JOB_FAILED

    def test_missing_input_path_rejected_at_submit(self, cluster):
        config = apply_overrides(SAMPLE, {"classify.path": "dropbox:/missing"})
        code, _ = submit_and_monitor(cluster.http_url, config,
                                     out=io.StringIO(), err=io.StringIO())
        assert code == EXIT_CONFIG


class TestSaveResults:
    def test_save_to_local_and_dropbox(self, cluster, tmp_path):
        out = io.StringIO()
        code, job_id = submit_and_monitor(cluster.http_url, SAMPLE,
                                          out=out, err=io.StringIO())
        assert code == EXIT_OK
        target = tmp_path / "exported"
        written = save_results(cluster.http_url, job_id, f"local:{target}")
        assert written
        assert all(str(path).startswith(str(target)) for path in written)

        dbx_root = tmp_path / "dbx"
        written2 = save_results(cluster.http_url, job_id, "dropbox:/saved",
                                dropbox_root=dbx_root)
        assert all(str(p).startswith(str(dbx_root)) for p in written2)
        # Idempotent: saving twice leaves identical bytes.
        first_bytes = [open(p, "rb").read() for p in written2]
        written3 = save_results(cluster.http_url, job_id, "dropbox:/saved",
                                dropbox_root=dbx_root)
        assert written2 == written3
        assert [open(p, "rb").read() for p in written3] == first_bytes

    def test_save_running_job_rejected(self, cluster):
        # A job id that does not exist yields JobNotDone via the 404 path.
        with pytest.raises(errors.JobNotDone):
            save_results(cluster.http_url, "missing-job", "local:/tmp/x")


class TestMainEntry:
    def test_submit_via_main(self, cluster, tmp_path, capsys):
        config_path = tmp_path / "config.json"
        config_path.write_text(SAMPLE)
        code = main(["submit", "--config", str(config_path),
                     "--coordinator", cluster.http_url, "--anonymous"])
        assert code == EXIT_OK
        captured = capsys.readouterr()
        assert len([l for l in captured.out.splitlines() if l]) == 2

    def test_submit_with_save_flag(self, cluster, tmp_path, capsys):
        config_path = tmp_path / "config.json"
        config_path.write_text(SAMPLE)
        target = tmp_path / "artifacts-out"
        code = main(["submit", "--config", str(config_path),
                     "--coordinator", cluster.http_url,
                     "--save", f"local:{target}"])
        assert code == EXIT_OK
        saved = list(target.rglob("*.json"))
        assert saved

    def test_missing_config_file(self, tmp_path):
        code = main(["submit", "--config", str(tmp_path / "none.json")])
        assert code == EXIT_CONFIG

"""
Unit tests for the /experiments and /version endpoints in main.py.

Covers:
- Successful NDJSON streaming of a small run
- Config errors (400) raised while streaming or after parsing
- ConfigUploadError handling (500 response)
"""

import json
import tempfile
import unittest
from unittest.mock import MagicMock, patch

from fastapi.testclient import TestClient

from main import app, get_runner_factory
from services.experiment_runner import ExperimentRunner
from utils.io_utils import ConfigUploadError


class TestExperimentsEndpoint(unittest.TestCase):
    """
    Unit tests for the run_experiment controller.
    """

    def setUp(self) -> None:
        """
        Create a test client whose runs go to a temporary directory.
        """
        self._tmp = tempfile.TemporaryDirectory()
        output_dir = self._tmp.name
        app.dependency_overrides[get_runner_factory] = (
            lambda: lambda config: ExperimentRunner(config, output_dir=output_dir)
        )
        self.client = TestClient(app)

    def tearDown(self) -> None:
        app.dependency_overrides.clear()
        self._tmp.cleanup()

    def test_successful_request_streams_ndjson(self) -> None:
        """
        Test that a valid config returns one line per job and a final manifest line.
        """
        body = json.dumps({"experiment": "two-point", "steps": 10, "seeds": [0], "emit_plots": False})
        response = self.client.post("/experiments", content=body)

        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.headers["content-type"], "application/x-ndjson")
        lines = [json.loads(line) for line in response.text.splitlines()]
        self.assertEqual([line["event"] for line in lines], ["started", "job", "job", "manifest"])
        self.assertEqual(lines[-1]["exit_code"], 0)

    def test_unknown_key_returns_400(self) -> None:
        """
        Test that an unknown top-level key is rejected while the body streams in.
        """
        response = self.client.post("/experiments", content=b'{"experiment": "quadratic", "colour": 1}')

        self.assertEqual(response.status_code, 400)
        self.assertEqual(response.json()["fields"], ["colour"])

    def test_invalid_config_returns_400(self) -> None:
        """
        Test that a config failing field validation returns 400.
        """
        response = self.client.post("/experiments", content=b'{"experiment": "quadratic", "steps": 0}')

        self.assertEqual(response.status_code, 400)
        self.assertIn("steps", response.json()["fields"])

    @patch("utils.request_utils.save_request_to_tempfile")
    def test_config_upload_error_returns_500(self, mock_save: MagicMock) -> None:
        """
        Test that a storage failure while saving the config returns a 500 JSON error.
        """
        mock_save.side_effect = ConfigUploadError(
            "Could not store the experiment config body", raw_error=OSError("disk full")
        )

        response = self.client.post("/experiments", content=b'{"experiment": "quadratic"}')

        self.assertEqual(response.status_code, 500)
        self.assertEqual(response.json(), {"error": "Could not store the experiment config body"})

    def test_version(self) -> None:
        """
        Test that /version reports the tool and version.
        """
        response = self.client.get("/version")

        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.json(), {"tool": "iteration-order-lab", "version": "0.1.0"})

    def test_routes_are_documented(self) -> None:
        """
        Test that every route publishes its docstring as the OpenAPI description.
        """
        paths = self.client.get("/openapi.json").json()["paths"]

        self.assertTrue(paths["/version"]["get"]["description"].startswith("Report the tool name and version."))
        self.assertTrue(paths["/experiments"]["post"]["description"])


if __name__ == "__main__":
    unittest.main()

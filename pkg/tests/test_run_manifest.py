#!/usr/bin/env python3
"""
Tests for run manifests and ambient settings
"""

import hashlib
import logging
import os
import shutil
import sys
import tempfile
import unittest
from unittest.mock import patch

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from tests.test_config import setup_test_environment
setup_test_environment()

import lab_config
from run_manifest import ManifestError, RunManifest, file_digest, manifest_path


class TestRunManifest(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def _file(self, name, text):
        path = os.path.join(self.tmp, name)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)
        return path

    def test_file_digest(self):
        path = self._file('a.txt', 'hello')
        self.assertEqual(file_digest(path), hashlib.sha256(b'hello').hexdigest())

    def test_save_and_load(self):
        inputs = self._file('f.csv', '1,2\n')
        manifest = RunManifest(command='dynamics', argv=['dynamics', '--seed', '3'],
                               config={'flags': {'seed': 3}}, seed=3)
        manifest.add_input(inputs)
        manifest.finish(0)
        path = manifest.save(manifest_path(os.path.join(self.tmp, 'out.jsonl')))
        self.assertTrue(path.endswith('out.jsonl.manifest.json'))

        loaded = RunManifest.load(path)
        self.assertEqual(loaded.argv, ['dynamics', '--seed', '3'])
        self.assertEqual(loaded.seed, 3)
        self.assertEqual(loaded.tool_version, lab_config.TOOL_VERSION)
        self.assertEqual(loaded.exit_code, 0)
        self.assertIsNotNone(loaded.finished)
        self.assertEqual(loaded.digest(), manifest.digest())
        self.assertEqual(loaded.changed_inputs(), [])

    def test_changed_inputs(self):
        inputs = self._file('f.csv', '1,2\n')
        manifest = RunManifest(command='dynamics', argv=['dynamics'], config={})
        manifest.add_input(inputs)
        self._file('f.csv', '3,4\n')
        self.assertEqual(manifest.changed_inputs(), [inputs])

    def test_digest_ignores_timestamps(self):
        a = RunManifest(command='verify', argv=['verify'], config={}, started='t1')
        b = RunManifest(command='verify', argv=['verify'], config={}, started='t2')
        self.assertEqual(a.digest(), b.digest())
        c = RunManifest(command='verify', argv=['verify', '--seed', '1'], config={})
        self.assertNotEqual(a.digest(), c.digest())

    def test_load_rejects_malformed(self):
        with self.assertRaises(ManifestError):
            RunManifest.load(self._file('bad.json', '{not json'))
        with self.assertRaises(ManifestError):
            RunManifest.load(self._file('partial.json', '{"seed": 1}'))


class TestLabSettings(unittest.TestCase):

    def test_defaults_from_test_environment(self):
        settings = lab_config.get_settings()
        self.assertIsNone(settings.s3_bucket)
        self.assertEqual(settings.s3_prefix, 'test_runs')
        self.assertEqual(settings.verify_workers, 1)
        self.assertFalse(settings.show_progress())

    def test_invalid_worker_count_falls_back(self):
        with patch.dict(os.environ, {'CONTRANORM_VERIFY_WORKERS': 'many'}):
            self.assertEqual(lab_config.get_settings().verify_workers, 1)
        with patch.dict(os.environ, {'CONTRANORM_VERIFY_WORKERS': '4'}):
            self.assertEqual(lab_config.get_settings().verify_workers, 4)

    def test_file_logging(self):
        tmp = tempfile.mkdtemp()
        try:
            settings = lab_config.LabSettings(log_level='INFO', log_dir=tmp)
            lab_config.configure_logging(settings)
            logging.getLogger('contranorm.test').info('hello from the test')
            for handler in logging.getLogger().handlers:
                handler.flush()
            with open(os.path.join(tmp, lab_config.LOG_FILE)) as f:
                self.assertIn('hello from the test', f.read())
        finally:
            lab_config.configure_logging(lab_config.get_settings())
            shutil.rmtree(tmp)


if __name__ == '__main__':
    unittest.main()

import json
import os
import tempfile

import numpy as np
from django.test import SimpleTestCase

from dwplab.exceptions import RejectedInputError
from dwplab.export import csv_bytes, export_pgm, json_bytes, quantize


class ExportTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_quantize_rounds_half_up_and_clips(self):
        values = np.array([0.0, 0.5, 1.0, -1.0, 2.0, 0.2 / 255])
        self.assertEqual(quantize(values).tolist(), [0, 128, 255, 0, 255, 0])

    def test_grayscale_images_become_pgm(self):
        image = np.linspace(0, 1, 24).reshape(1, 1, 4, 6)
        paths = export_pgm(image, self.tmp.name, [17], prefix='adv')
        self.assertEqual(paths, [os.path.join(self.tmp.name, 'adv_17.pgm')])
        with open(paths[0], 'rb') as f:
            data = f.read()
        self.assertTrue(data.startswith(b'P5'))
        self.assertIn(b'6 4', data)
        self.assertEqual(data[-24:], quantize(image[0, 0]).tobytes())

    def test_color_images_become_ppm(self):
        image = np.zeros((1, 3, 2, 2))
        image[0, 0] = 1.0
        (path,) = export_pgm(image, self.tmp.name, [3])
        self.assertTrue(path.endswith('x_3.ppm'))
        with open(path, 'rb') as f:
            data = f.read()
        self.assertTrue(data.startswith(b'P6'))
        self.assertEqual(data[-12:], bytes([255, 0, 0] * 4))

    def test_rejections(self):
        with self.assertRaises(RejectedInputError):
            export_pgm(np.zeros((2, 1, 4, 4)), self.tmp.name, [1])
        with self.assertRaises(RejectedInputError):
            export_pgm(np.zeros((1, 2, 4, 4)), self.tmp.name, [1])

    def test_csv_uses_bare_line_feeds(self):
        data = csv_bytes(['a', 'b'], [[1, 'x,y'], [2, 'z']])
        self.assertEqual(data, b'a,b\n1,"x,y"\n2,z\n')
        self.assertNotIn(b'\r', data)

    def test_json_is_sorted_with_a_trailing_newline(self):
        data = json_bytes({'b': 1, 'a': [1, 2]})
        self.assertTrue(data.endswith(b'}\n'))
        self.assertLess(data.index(b'"a"'), data.index(b'"b"'))
        self.assertEqual(json.loads(data), {'a': [1, 2], 'b': 1})

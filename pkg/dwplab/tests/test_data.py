import os
import struct
import unittest

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings
from hypothesis import strategies as st

from dwplab.data import (
    CIFAR_RECORD, Dataset, TargetAssignment, assign_targets, dump_targets, load_mnist, load_targets,
    make_synthetic, parse_cifar10, parse_idx, parse_idx_labels,
)
from dwplab.exceptions import (
    CifarLabelError, CifarLengthError, ConfigError, IdxLengthError, IdxMagicError, ParseError,
    RejectedInputError, TargetFileError, ValidationError,
)


def idx_images(pixels):
    n, h, w = pixels.shape
    return struct.pack('>IIII', 0x803, n, h, w) + pixels.astype(np.uint8).tobytes()


def idx_labels(labels):
    return struct.pack('>II', 0x801, len(labels)) + bytes(labels)


def cifar_record(label, fill=0):
    return bytes([label]) + bytes([fill]) * (CIFAR_RECORD - 1)


class IdxTests(SimpleTestCase):

    def test_images_are_scaled(self):
        pixels = np.array([[[0, 255], [51, 102]]])
        out = parse_idx(idx_images(pixels))
        self.assertEqual(out.shape, (1, 2, 2))
        np.testing.assert_allclose(out.data, pixels / 255.0, rtol=1e-6)

    def test_label_file_keeps_values(self):
        np.testing.assert_array_equal(parse_idx(idx_labels([3, 9, 0])).data, [3, 9, 0])
        np.testing.assert_array_equal(parse_idx_labels(idx_labels([3, 9, 0])), [3, 9, 0])

    def test_bad_magic(self):
        with self.assertRaises(IdxMagicError):
            parse_idx(struct.pack('>IIII', 0x804, 1, 1, 1) + b'\x00')

    def test_short_payload(self):
        with self.assertRaises(IdxLengthError):
            parse_idx(struct.pack('>IIII', 0x803, 2, 2, 2) + b'\x00' * 7)

    def test_long_payload(self):
        with self.assertRaises(IdxLengthError):
            parse_idx(struct.pack('>IIII', 0x803, 1, 1, 1) + b'\x00\x00')

    def test_truncated_header(self):
        with self.assertRaises(IdxLengthError):
            parse_idx(struct.pack('>II', 0x803, 1))

    @given(st.integers(0, 19))
    @settings(max_examples=20, deadline=None)
    def test_every_truncation_is_rejected(self, cut):
        blob = idx_images(np.arange(12).reshape(1, 3, 4))
        with self.assertRaises(ParseError):
            parse_idx(blob[:cut])


class CifarTests(SimpleTestCase):

    def test_two_records(self):
        data = parse_cifar10(cifar_record(3, 255) + cifar_record(7, 0))
        np.testing.assert_array_equal(data.labels, [3, 7])
        self.assertEqual(data.images.shape, (2, 3, 32, 32))
        self.assertEqual(data.images[0].min(), 1.0)
        self.assertEqual(data.images[1].max(), 0.0)

    def test_channel_major_layout(self):
        record = bytearray(cifar_record(0))
        record[1 + 1024 + 5] = 255  # green plane, row 0, column 5
        data = parse_cifar10(bytes(record))
        self.assertEqual(data.images[0, 1, 0, 5], 1.0)
        self.assertEqual(data.images[0, 0, 0, 5], 0.0)

    def test_empty_and_ragged_blobs(self):
        for blob in (b'', cifar_record(1)[:-1], cifar_record(1) + b'\x00'):
            with self.subTest(length=len(blob)):
                with self.assertRaises(CifarLengthError):
                    parse_cifar10(blob)

    def test_label_out_of_range(self):
        with self.assertRaises(CifarLabelError):
            parse_cifar10(cifar_record(10))


class DatasetTests(SimpleTestCase):

    def test_mismatched_lengths(self):
        with self.assertRaises(RejectedInputError):
            Dataset(np.zeros((2, 1, 8, 8)), np.zeros(3, dtype=np.int64), np.arange(2))

    def test_duplicate_ids(self):
        with self.assertRaises(RejectedInputError):
            Dataset(np.zeros((2, 1, 8, 8)), np.zeros(2, dtype=np.int64), np.array([1, 1]))

    def test_select_ids_keeps_order(self):
        data = make_synthetic(10, seed=1)
        picked = data.select_ids([7, 2])
        np.testing.assert_array_equal(picked.ids, [7, 2])
        np.testing.assert_array_equal(picked.images[0], data.images[7])

    def test_select_unknown_id(self):
        with self.assertRaises(RejectedInputError):
            make_synthetic(4).select_ids([99])

    def test_synthetic_is_deterministic_and_bounded(self):
        a, b = make_synthetic(30, seed=3), make_synthetic(30, seed=3)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)
        self.assertTrue(np.all((a.images >= 0) & (a.images <= 1)))
        self.assertEqual(a.images.dtype, np.float32)

    def test_synthetic_rejects_tiny_images(self):
        with self.assertRaises(ConfigError):
            make_synthetic(4, shape=(1, 4, 4))

    @unittest.skipUnless(os.environ.get('DWP_MNIST_DIR'), 'DWP_MNIST_DIR is not set')
    def test_real_mnist(self):
        data = load_mnist(os.environ['DWP_MNIST_DIR'], 'test')
        self.assertEqual(data.images.shape, (10000, 1, 28, 28))
        self.assertEqual(data.labels.max(), 9)


class TargetTests(SimpleTestCase):

    def test_assignment_never_picks_the_true_label(self):
        data = make_synthetic(200, seed=0)
        assignment = assign_targets(data, 10, seed=5)
        self.assertTrue(np.all(assignment.targets != data.labels))
        self.assertTrue(np.all((assignment.targets >= 0) & (assignment.targets < 10)))

    def test_assignment_depends_only_on_seed_and_id(self):
        data = make_synthetic(50, seed=0)
        full = assign_targets(data, 10, seed=1)
        part = assign_targets(data.subset([10, 3]), 10, seed=1)
        self.assertEqual(part.rows, (full.rows[10], full.rows[3]))

    def test_two_classes_is_deterministic(self):
        data = make_synthetic(20, num_classes=2, seed=0)
        np.testing.assert_array_equal(assign_targets(data, 2, seed=0).targets, 1 - data.labels)

    def test_one_class_is_rejected(self):
        with self.assertRaises(ConfigError):
            assign_targets(make_synthetic(4), 1, seed=0)

    def test_csv_round_trip(self):
        assignment = assign_targets(make_synthetic(12, seed=2), 10, seed=3)
        self.assertEqual(load_targets(dump_targets(assignment)), assignment)

    def test_dump_uses_lf(self):
        text = dump_targets(TargetAssignment(((0, 1, 2),))).decode()
        self.assertEqual(text, 'id,true_label,target_label\n0,1,2\n')

    def test_target_equal_to_true_label_names_the_row(self):
        with self.assertRaises(ValidationError) as ctx:
            load_targets(b'id,true_label,target_label\n0,1,2\n1,4,4\n')
        self.assertEqual(ctx.exception.row, 2)

    def test_duplicate_id(self):
        with self.assertRaises(ValidationError):
            load_targets(b'id,true_label,target_label\n5,1,2\n5,3,4\n')

    def test_malformed_files(self):
        for blob in (b'', b'id,label,target\n0,1,2\n', b'id,true_label,target_label\n0,1\n',
                     b'id,true_label,target_label\n0,x,2\n', b'id,true_label,target_label\n0,3,\xff\n'):
            with self.subTest(blob=blob):
                with self.assertRaises(TargetFileError):
                    load_targets(blob)

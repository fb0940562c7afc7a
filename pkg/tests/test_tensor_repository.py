"""Tensor files and attention-stack directories."""

import json

import numpy as np
import pytest
import torch

from guided_slots.exceptions import (
    BadMagicError,
    HeaderError,
    ShapeSizeMismatchError,
    TensorFileIOError,
    TruncatedPayloadError,
)
from guided_slots.models.diffusion import AttnStack, AttnStackMeta
from guided_slots.models.tensors import TensorFile
from guided_slots.repositories.tensor_repository import (
    MAGIC,
    read_attn_stack,
    read_tensor,
    write_attn_stack,
    write_tensor,
)

pytestmark = pytest.mark.unit


def _raw(header: dict, payload: bytes) -> bytes:
    return MAGIC + json.dumps(header).encode("utf-8") + b"\n" + payload


class TestTensorFiles:
    def test_random_tensors_survive_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        for k in range(20):
            array = rng.normal(size=(3, 16, 16)).astype(np.float32)
            t = TensorFile.from_array(array, name=f"t{k}")
            write_tensor(t, tmp_path / f"t{k}.gltensor")
            assert read_tensor(tmp_path / f"t{k}.gltensor") == t

    @pytest.mark.parametrize(
        "array,dtype",
        [
            (np.arange(6, dtype=np.int64).reshape(2, 3), "int32"),
            (np.array([True, False, True]), "uint8"),
            (np.array([0.5], dtype=np.float64), "float32"),
        ],
    )
    def test_dtype_inference(self, tmp_path, array, dtype):
        t = TensorFile.from_array(array)
        assert t.dtype == dtype
        write_tensor(t, tmp_path / "x.gltensor")
        np.testing.assert_array_equal(read_tensor(tmp_path / "x.gltensor").to_array(), array.astype(t.to_array().dtype))

    def test_payload_is_little_endian(self, tmp_path):
        t = TensorFile.from_array(np.array([1], dtype=">i4"), dtype="int32")
        write_tensor(t, tmp_path / "x.gltensor")
        raw = (tmp_path / "x.gltensor").read_bytes()
        assert raw.endswith(b"\x01\x00\x00\x00")

    def test_zero_dimensional_rejected(self):
        with pytest.raises(ValueError):
            TensorFile.from_array(np.float32(1.0))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.gltensor"
        path.write_bytes(b"NOTATENS" + b"{}\n")
        with pytest.raises(BadMagicError):
            read_tensor(path)

    def test_missing_header_line(self, tmp_path):
        path = tmp_path / "bad.gltensor"
        path.write_bytes(MAGIC + b'{"dtype": "float32"')
        with pytest.raises(HeaderError):
            read_tensor(path)

    def test_unknown_dtype(self, tmp_path):
        path = tmp_path / "bad.gltensor"
        path.write_bytes(_raw({"dtype": "complex64", "shape": [1], "name": ""}, b"\x00" * 8))
        with pytest.raises(HeaderError):
            read_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.gltensor"
        path.write_bytes(_raw({"dtype": "float32", "shape": [4], "name": "", "nbytes": 16}, b"\x00" * 10))
        with pytest.raises(TruncatedPayloadError):
            read_tensor(path)

    def test_shape_size_mismatch(self, tmp_path):
        path = tmp_path / "mismatch.gltensor"
        path.write_bytes(_raw({"dtype": "float32", "shape": [3], "name": "", "nbytes": 16}, b"\x00" * 16))
        with pytest.raises(ShapeSizeMismatchError):
            read_tensor(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(TensorFileIOError) as exc_info:
            read_tensor(tmp_path / "absent.gltensor")
        assert exc_info.value.path.endswith("absent.gltensor")

    def test_format_errors_are_value_errors(self, tmp_path):
        path = tmp_path / "bad.gltensor"
        path.write_bytes(b"garbage!")
        with pytest.raises(ValueError):
            read_tensor(path)


class TestAttnStacks:
    def _stack(self) -> AttnStack:
        generator = torch.Generator().manual_seed(1)
        cross = [torch.rand(4, 4, 3, generator=generator), torch.rand(2, 2, 3, generator=generator)]
        self_ = [torch.rand(16, 16, generator=generator).softmax(-1), torch.rand(4, 4, generator=generator).softmax(-1)]
        meta = AttnStackMeta(timesteps=[3, 3], resolutions=[(4, 4), (2, 2)], token_class_ids=(-1, 1, 2))
        return AttnStack(cross=cross, self_=self_, meta=meta)

    def test_stack_directory_round_trip(self, tmp_path):
        stack = self._stack()
        write_attn_stack(stack, tmp_path / "stack")
        loaded = read_attn_stack(tmp_path / "stack")
        assert loaded.meta.timesteps == [3, 3]
        assert loaded.meta.resolutions == [(4, 4), (2, 2)]
        assert loaded.meta.token_class_ids == (-1, 1, 2)
        for a, b in zip(stack.cross + stack.self_, loaded.cross + loaded.self_):
            assert torch.equal(a, b)

    def test_batched_stack_rejected(self, tmp_path):
        stack = AttnStack(cross=[torch.rand(2, 4, 4, 3)], self_=[], meta=AttnStackMeta())
        with pytest.raises(ValueError):
            write_attn_stack(stack, tmp_path / "stack")
        write_attn_stack(stack.select(1), tmp_path / "stack")

    def test_external_index_without_meta(self, tmp_path):
        write_tensor(TensorFile.from_array(np.ones((4, 4, 2), dtype=np.float32)), tmp_path / "c.gltensor")
        (tmp_path / "stack.json").write_text(json.dumps({"cross": ["c.gltensor"]}))
        stack = read_attn_stack(tmp_path)
        assert stack.meta.resolutions == [(4, 4)]
        assert stack.self_ == []

    def test_missing_index(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_attn_stack(tmp_path)

import numpy as np
import pytest
import torch

from reflectdiff.checkpoint import (
    load_checkpoint,
    load_module_arrays,
    module_arrays,
    save_checkpoint,
)
from reflectdiff.models import ArchConfig, SynthesisNet


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a.weight": rng.normal(size=(3, 4)).astype(np.float32),
        "b.bias": rng.normal(size=(7,)),
        "c.step": np.asarray(5.0, dtype=np.float32),
        "d.ints": np.arange(6, dtype=np.int64).reshape(2, 3),
    }
    manifest = {"stage": "paired", "step": 5, "seed": 1}
    path = tmp_path / "ck.rdck"
    save_checkpoint(path, manifest, dict(arrays))
    ck = load_checkpoint(path)
    assert ck.manifest == manifest
    assert set(ck.arrays) == set(arrays)
    for name, arr in arrays.items():
        assert ck.arrays[name].dtype == arr.dtype
        np.testing.assert_array_equal(ck.arrays[name], arr)
        assert ck.arrays[name].tobytes() == arr.tobytes()


def test_identical_contents_identical_bytes(tmp_path):
    arrays = {"w": np.ones((2, 2), dtype=np.float32), "v": np.zeros(3)}
    manifest = {"step": 0, "seed": 9, "stage": "paired"}
    p1, p2 = tmp_path / "a.rdck", tmp_path / "b.rdck"
    save_checkpoint(p1, dict(manifest), dict(arrays))
    save_checkpoint(p2, dict(manifest), dict(arrays))
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "junk.rdck"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(p)


def test_module_arrays_round_trip(tmp_path):
    torch.manual_seed(0)
    arch = ArchConfig(heads=2, synth_hidden=(4,))
    net = SynthesisNet(arch)
    torch.nn.init.normal_(net.out.weight)  # make the zero-init layer nontrivial
    arrays = module_arrays(net, "synthesizer")
    path = tmp_path / "m.rdck"
    save_checkpoint(path, {"arch": arch.to_dict()}, arrays)

    torch.manual_seed(123)
    other = SynthesisNet(arch)
    ck = load_checkpoint(path)
    load_module_arrays(other, ck.arrays, "synthesizer")
    for (k1, v1), (k2, v2) in zip(net.state_dict().items(), other.state_dict().items()):
        assert k1 == k2
        assert torch.equal(v1, v2)


def test_missing_array_named_in_error(tmp_path):
    torch.manual_seed(0)
    net = SynthesisNet(ArchConfig(heads=2, synth_hidden=(4,)))
    arrays = module_arrays(net, "synthesizer")
    del arrays["synthesizer.gate.weight"]
    path = tmp_path / "m.rdck"
    save_checkpoint(path, {}, arrays)
    fresh = SynthesisNet(ArchConfig(heads=2, synth_hidden=(4,)))
    with pytest.raises(KeyError, match="synthesizer.gate.weight"):
        load_module_arrays(fresh, load_checkpoint(path).arrays, "synthesizer")

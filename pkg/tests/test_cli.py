import hashlib
import json

import pytest

from toycompose import pipeline
from toycompose.checkpoint import state_checksum
from toycompose.cli import main

SMALL = {
    "model": {"d_text": 16, "text_layers": 1, "text_heads": 2, "channels": 16, "attn_heads": 2},
    "schedule": {"T": 100},
    "data": {"n_scenes": 64},
    "pretrain": {"steps": 100, "batch_size": 8, "log_every": 0},
    "residual": {"steps": 5, "batch_size": 2, "corpus_size": 20, "corpus_batch": 2},
    "sampler": {"steps": 4},
}
LAYOUT = {
    "canvas": [16, 16],
    "boxes": [{"subject": "green", "box": [0.0, 0.25, 0.5, 0.75]}, {"subject": "blue", "box": [0.5, 0.25, 1.0, 0.75]}],
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["pretrain", "--config", str(cfg), "--out", str(root / "base")]) == 0
    return root


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_pretrain_smoke_is_loadable_and_reproducible(run, tmp_path):
    ckpt = run / "base" / "base.ckpt"
    models, manifest = pipeline.load_models(ckpt)
    assert len((run / "base" / "pretrain_loss.jsonl").read_text().splitlines()) == 100
    assert models.config.model.d_text == 16
    assert main(["pretrain", "--config", str(run / "small.json"), "--out", str(tmp_path)]) == 0
    assert _sha(tmp_path / "pretrain_loss.jsonl") == _sha(run / "base" / "pretrain_loss.jsonl")
    assert _sha(tmp_path / "base.ckpt") == _sha(ckpt)
    # refusing to clobber is a collision error
    assert main(["pretrain", "--config", str(run / "small.json"), "--out", str(tmp_path)]) == 4


def test_registry_list_empty(tmp_path, capsys):
    assert main(["registry", "list", "--registry", str(tmp_path / "empty")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("name")


def _learn(run, reg, name, subject, extra=()):
    return main(
        ["learn-residual", "--checkpoint", str(run / "base" / "base.ckpt"), "--subject", subject,
         "--name", name, "--registry", str(reg), *extra]
    )


def test_learn_residual_inspect_and_verify(run, tmp_path, capsys):
    reg = tmp_path / "reg"
    before = _sha(run / "base" / "base.ckpt")
    assert _learn(run, reg, "green", "circle:green") == 0
    assert _sha(run / "base" / "base.ckpt") == before
    assert [p.stem for p in reg.iterdir()] == ["green"]
    capsys.readouterr()
    assert main(["registry", "inspect", "green", "--registry", str(reg)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["d_text"] == 16
    assert 64 <= info["size_bytes"] <= 64 + 820
    assert info["norm"] > 0
    # same seed, same residual
    assert _learn(run, tmp_path / "reg2", "green", "circle:green") == 0
    assert list((tmp_path / "reg2").iterdir())[0].read_bytes() == list(reg.iterdir())[0].read_bytes()
    # existing name without --overwrite
    assert _learn(run, reg, "green", "circle:green") == 2
    assert main(["registry", "verify", "--registry", str(reg)]) == 0
    path = next(reg.iterdir())
    data = bytearray(path.read_bytes())
    data[-10] ^= 0xFF
    path.write_bytes(bytes(data))
    capsys.readouterr()
    assert main(["registry", "verify", "--registry", str(reg)]) == 4
    assert "ChecksumError" in capsys.readouterr().out


@pytest.fixture(scope="module")
def two_subjects(run):
    reg = run / "reg"
    assert _learn(run, reg, "green", "circle:green") == 0
    assert _learn(run, reg, "blue", "circle:blue") == 0
    (run / "layout.json").write_text(json.dumps(LAYOUT))
    return reg


def _generate(run, reg, out, *extra):
    return main(
        ["generate", "--checkpoint", str(run / "base" / "base.ckpt"), "--registry", str(reg),
         "--prompt", "a photo of circle and circle", "--out", str(out), *extra]
    )


BINDS = ["--bind", "circle@1=green", "--bind", "circle@2=blue"]


def test_generate_is_byte_deterministic_and_training_free(run, two_subjects, tmp_path):
    ckpt_before = _sha(run / "base" / "base.ckpt")
    models, _ = pipeline.load_models(run / "base" / "base.ckpt")
    params = (state_checksum(models.denoiser), state_checksum(models.encoder))
    args = [*BINDS, "--layout", str(run / "layout.json"), "--seed", "3", "--seed", "4"]
    assert _generate(run, two_subjects, tmp_path / "a", *args) == 0
    assert _generate(run, two_subjects, tmp_path / "b", *args) == 0
    for name in ("seed_00003.png", "seed_00004.png"):
        assert _sha(tmp_path / "a" / name) == _sha(tmp_path / "b" / name)
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["training_steps"] == 0
    assert man["parameter_checksum_before"] == man["parameter_checksum_after"]
    assert [b["entry"] for b in man["bindings"]] == ["green", "blue"]
    assert man["layout_hash"] and man["config_hash"]
    assert _sha(run / "base" / "base.ckpt") == ckpt_before
    again, _ = pipeline.load_models(run / "base" / "base.ckpt")
    assert (state_checksum(again.denoiser), state_checksum(again.encoder)) == params


def test_generate_plain_and_errors(run, two_subjects, tmp_path):
    assert _generate(run, two_subjects, tmp_path / "plain") == 0
    assert (tmp_path / "plain" / "seed_00000.png").exists()
    # binding without a layout box
    assert _generate(run, two_subjects, tmp_path / "x", *BINDS) == 2
    # unknown entry
    assert _generate(run, two_subjects, tmp_path / "y", "--bind", "circle=nobody",
                     "--layout", str(run / "layout.json")) == 2
    # threads without the opt-in
    assert _generate(run, two_subjects, tmp_path / "z", "--threads", "2") == 2


def test_evaluate_checks_config_hash(run, two_subjects, tmp_path, capsys):
    out = tmp_path / "gen"
    assert _generate(run, two_subjects, out, *BINDS, "--layout", str(run / "layout.json"), "--n-seeds", "2") == 0
    specs = tmp_path / "specs.json"
    specs.write_text(json.dumps({
        "green": {"base_category": "circle", "color": "green"},
        "blue": {"base_category": "circle", "color": "blue"},
    }))
    man = str(out / "manifest.json")
    assert main(["evaluate", "--manifest", man, "--specs", str(specs)]) == 2
    capsys.readouterr()
    report = tmp_path / "report.json"
    assert main(["evaluate", "--config", str(run / "small.json"), "--manifest", man, "--specs", str(specs),
                 "--out", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert rep["n_images"] == 2 and set(rep["presence_rate"]) == {"blue", "green"}
    assert main(["evaluate", "--manifest", man, "--specs", str(specs), "--force"]) == 0
    # a tampered image is an I/O failure
    png = out / "seed_00000.png"
    png.write_bytes(png.read_bytes() + b"\0")
    assert main(["evaluate", "--config", str(run / "small.json"), "--manifest", man, "--specs", str(specs)]) == 4

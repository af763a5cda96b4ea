import json

import numpy as np
import pytest

from kdrank.cli import main

SPEC = {"vocab_size": 40, "n_topics": 8, "words_per_topic": 4, "tokens_per_turn": 4, "turns_per_context": 2,
        "n_candidates": 4, "n_train": 32, "n_valid": 12, "n_test": 12, "noise": 0.1, "seed": 2}
SMALL = {"model": {"d": 8, "n_layers": 1, "n_heads": 2, "ffn_mult": 2},
         "train": {"lr": 0.003, "epochs": 2, "batch_size": 8}}


@pytest.fixture(autouse=True)
def _scratch_cwd(tmp_path, monkeypatch):
    # commands without --out drop their manifest in the working directory
    monkeypatch.chdir(tmp_path)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(SPEC))
    (root / "small.json").write_text(json.dumps(SMALL))
    assert run("gen-data", "--spec", root / "spec.json", "--out", root / "data") == 0
    assert run("build-vocab", "--data", root / "data", "--out", root / "vocab.txt") == 0
    common = ["--data", root / "data", "--vocab", root / "vocab.txt", "--config", root / "small.json"]
    assert run("train-teacher", *common, "--out", root / "teacher.npz") == 0
    assert run("cache-logits", "--teacher", root / "teacher.npz", "--data", root / "data",
               "--out", root / "logits.jsonl") == 0
    return root, common


def params(path):
    with np.load(path) as z:
        return {k: z[k].copy() for k in z.files if k.startswith("param/")}


class TestPipeline:
    def test_data_and_manifest(self, work):
        root, _ = work
        assert sorted(p.name for p in (root / "data").iterdir()) == ["manifest.json", "test.jsonl", "train.jsonl", "valid.jsonl"]
        manifest = json.loads((root / "vocab.txt.manifest.json").read_text())
        assert manifest["command"] == "build-vocab"
        assert len(manifest["inputs"]["train"]["sha256"]) == 64

    def test_gen_data_reproducible(self, work, tmp_path):
        root, _ = work
        assert run("gen-data", "--spec", root / "spec.json", "--out", tmp_path / "again") == 0
        for split in ("train", "valid", "test"):
            assert (tmp_path / "again" / f"{split}.jsonl").read_bytes() == (root / "data" / f"{split}.jsonl").read_bytes()

    def test_seed_override(self, work, tmp_path):
        root, _ = work
        run("gen-data", "--spec", root / "spec.json", "--out", tmp_path / "s9", "--seed", 9)
        assert (tmp_path / "s9" / "train.jsonl").read_bytes() != (root / "data" / "train.jsonl").read_bytes()
        assert json.loads((tmp_path / "s9" / "manifest.json").read_text())["seed"] == 9

    def test_logits(self, work):
        root, _ = work
        lines = (root / "logits.jsonl").read_text().splitlines()
        assert len(lines) == SPEC["n_train"]
        first = json.loads(lines[0])
        assert set(first) == {"id", "teacher_logits"} and len(first["teacher_logits"]) == SPEC["n_candidates"]

    def test_evaluate_reproduces_stored(self, work, capsys):
        root, _ = work
        capsys.readouterr()
        assert run("evaluate", "--model", root / "teacher.npz", "--data", root / "data", "--split", "valid") == 0
        report = json.loads(capsys.readouterr().out)
        assert report["matches_stored"] is True

    def test_alpha_one_matches_no_kd(self, work):
        root, common = work
        assert run("distill", *common, "--student", "bi", "--out", root / "nokd.npz") == 0
        assert run("distill", *common, "--student", "bi", "--alpha", 1, "--teacher-logits", root / "logits.jsonl",
                   "--out", root / "a1.npz") == 0
        a, b = params(root / "nokd.npz"), params(root / "a1.npz")
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_kd_and_compare(self, work, capsys):
        root, common = work
        assert run("distill", *common, "--student", "bilstm", "--alpha", 0.5,
                   "--teacher-logits", root / "logits.jsonl", "--out", root / "kd.npz") == 0
        capsys.readouterr()
        assert run("evaluate", "--model", root / "kd.npz", "--data", root / "data",
                   "--compare", root / "teacher.npz", "--out", root / "eval.json") == 0
        report = json.loads((root / "eval.json").read_text())
        assert 0.0 <= report["p_value[R@1]"] <= 1.0 and 0.0 <= report["p_value[MRR]"] <= 1.0
        assert 0.0 <= report["R@1"] <= 100.0

    @pytest.mark.parametrize("ablate,missing,rows", [("submult", None, 6), ("attention", "head.W1", 12)])
    def test_ablations(self, work, capsys, ablate, missing, rows):
        root, common = work
        capsys.readouterr()
        out = root / f"abl-{ablate}.npz"
        assert run("train-teacher", *common, "--ablate", ablate, "--epochs", 1, "--out", out) == 0
        shapes = json.loads(capsys.readouterr().out)["head_shapes"]
        assert shapes["head.W_proj"] == [rows * 8, 8]
        if missing:
            assert missing not in shapes
        else:
            assert shapes["head.W1"] == [32, 8]

    def test_plain_cross(self, work):
        root, common = work
        assert run("train-teacher", *common, "--head", "plain_cross", "--epochs", 1, "--out", root / "plain.npz") == 0

    def test_index_and_bench(self, work, capsys):
        root, common = work
        if not (root / "nokd.npz").exists():
            run("distill", *common, "--out", root / "nokd.npz")
        assert run("index", "--model", root / "nokd.npz", "--responses", root / "data" / "test.jsonl",
                   "--out", root / "cands.idx") == 0
        capsys.readouterr()
        assert run("bench", "--model", root / "nokd.npz", "--data", root / "data", "--candidates", "2,4",
                   "--samples", 2, "--warmup", 1, "--index", root / "cands.idx") == 0
        report = json.loads(capsys.readouterr().out)
        assert [e["k"] for e in report["entries"]] == [2, 4] and report["ratio"] > 0


class TestExitCodes:
    def test_missing_argument(self):
        with pytest.raises(SystemExit) as exc:
            run("distill")
        assert exc.value.code == 1

    def test_missing_data(self, tmp_path):
        assert run("build-vocab", "--data", tmp_path / "nope", "--out", tmp_path / "v.txt") == 2

    def test_bad_checkpoint(self, tmp_path):
        (tmp_path / "junk.npz").write_bytes(b"junk")
        assert run("evaluate", "--model", tmp_path / "junk.npz", "--data", tmp_path) == 2

    def test_alpha_without_logits(self, work):
        root, common = work
        assert run("distill", *common, "--alpha", 0.5, "--out", root / "x.npz") == 1

    def test_ablate_plain(self, work):
        root, common = work
        assert run("train-teacher", *common, "--head", "plain_cross", "--ablate", "submult", "--out", root / "x.npz") == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, work):
        root, common = work
        assert run("distill", *common, "--lr", 1e300, "--epochs", 3, "--out", root / "boom.npz") == 3

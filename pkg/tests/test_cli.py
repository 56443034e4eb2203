import numpy as np
import pytest

from convncf.cli import main
from convncf.config import ConfigError, RunConfig, build_config, parse_value
from convncf.data import load_interactions
from convncf.model import load_checkpoint


@pytest.fixture
def toy(tmp_path):
    """16 users x 20 items, 6 interactions each, deterministic layout."""
    lines = []
    for u in range(16):
        for k in range(6):
            lines.append(f"user{u:02d}\tprod{(u + 2 * k) % 20:02d}\t{100 + k}\n")
    path = tmp_path / "toy.tsv"
    path.write_text("".join(lines), encoding="utf-8")
    return str(path)


def run(capsys, *argv):
    rc = main(list(argv))
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


class TestConfig:
    def test_defaults(self):
        cfg = build_config(None, [])
        assert cfg.K == 64 and cfg.variant == "mf" and cfg.pretrain is True

    def test_file_then_override(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# experiment\nK = 16\nepochs = 5\nK = 32\n", encoding="utf-8")
        cfg = build_config(str(path), ["--K=8", "seed=7"])
        assert cfg.K == 8  # command line beats file; last file entry beats first
        assert cfg.epochs == 5 and cfg.seed == 7

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="epochz"):
            build_config(None, ["epochz=3"])

    def test_bad_value_type(self):
        with pytest.raises(ConfigError, match="epochs"):
            build_config(None, ["epochs=many"])

    def test_bool_parsing(self):
        assert parse_value("pretrain", "off") is False
        assert parse_value("per_user", "YES") is True
        with pytest.raises(ConfigError):
            parse_value("pretrain", "maybe")

    def test_malformed_override(self):
        with pytest.raises(ConfigError, match="form"):
            build_config(None, ["--epochs"])

    def test_validation_rejects_depth_mismatch(self):
        with pytest.raises(ConfigError, match="depth"):
            build_config(None, ["K=64", "depth=5"])

    def test_validation_rejects_bad_variant(self):
        with pytest.raises(ConfigError, match="variant"):
            build_config(None, ["variant=ncf"])


class TestIngest:
    def test_counts_and_manifest(self, toy, tmp_path, capsys):
        out1 = tmp_path / "run1"
        rc, out, _ = run(capsys, "ingest", f"dataset={toy}", f"outdir={out1}")
        assert rc == 0
        got = dict(line.split(" ", 1) for line in out.splitlines())
        assert got["users"] == "16"
        assert got["items"] == "20"
        assert got["interactions"] == "96"
        assert got["skipped_users"] == "0"
        assert got["filter_stable"] == "true"
        manifest = (out1 / "manifest.tsv").read_bytes()

        out2 = tmp_path / "run2"
        rc, _, _ = run(capsys, "ingest", f"dataset={toy}", f"outdir={out2}")
        assert rc == 0
        assert (out2 / "manifest.tsv").read_bytes() == manifest

    def test_missing_dataset_fails_cleanly(self, tmp_path, capsys):
        rc, _, err = run(capsys, "ingest", f"dataset={tmp_path}/absent.tsv", f"outdir={tmp_path}")
        assert rc == 1
        assert err.startswith("error:")

    def test_dataset_key_required(self, tmp_path, capsys):
        rc, _, err = run(capsys, "ingest", f"outdir={tmp_path}")
        assert rc == 1 and "dataset" in err


class TestParamcount:
    def test_flagship_tower(self, capsys):
        rc, out, _ = run(capsys, "paramcount", "K=64", "C=32", "head=cnn", "merge=outer")
        assert rc == 0
        total_line = [l for l in out.splitlines() if l.startswith("head total")]
        assert total_line and total_line[0].split()[-1] == "20,646"

    def test_wide_mlp(self, capsys):
        rc, out, _ = run(
            capsys, "paramcount", "K=64", "head=mlp", "merge=outer", "mlp_layers=1"
        )
        assert rc == 0
        first = [l for l in out.splitlines() if l.startswith("mlp.1.W")]
        assert first and first[0].split()[-1] == "8,388,608"

    def test_embedding_totals_with_dataset(self, toy, tmp_path, capsys):
        rc, out, _ = run(
            capsys, "paramcount", f"dataset={toy}", f"outdir={tmp_path}",
            "K=8", "C=4", "variant=svdpp",
        )
        assert rc == 0
        got = {l.split()[0]: l.split()[-1] for l in out.splitlines()}
        assert got["P"] == "128"  # 16 users x 8
        assert got["Q"] == got["Qp"] == "160"  # 20 items x 8


class TestGradcheckCommand:
    def test_passes_for_default_architecture(self, capsys):
        rc, out, _ = run(capsys, "gradcheck", "K=8", "C=4", "variant=svdpp")
        assert rc == 0
        assert out.strip().splitlines()[-1].startswith("PASS")

    def test_itempop_is_rejected(self, capsys):
        rc, _, err = run(capsys, "gradcheck", "variant=itempop")
        assert rc == 1 and "itempop" in err


class TestPipeline:
    MF_ARGS = (
        "variant=mf", "merge=inner", "head=identity", "K=4",
        "epochs=3", "epochs_pretrain=0", "pretrain=false",
        "lambda1=0", "lambda2=0", "batch_size=16", "seed=9",
    )

    def test_train_eval_recommend(self, toy, tmp_path, capsys):
        outdir = tmp_path / "run"
        rc, out, _ = run(capsys, "train", f"dataset={toy}", f"outdir={outdir}", *self.MF_ARGS)
        assert rc == 0
        assert (outdir / "model.ckpt").exists() and (outdir / "metrics.csv").exists()
        assert "test last-10" in out

        # eval on the saved checkpoint reproduces the final-epoch test metrics
        rc, out_eval, _ = run(
            capsys, "eval", f"dataset={toy}", f"outdir={outdir}",
            f"checkpoint={outdir}/model.ckpt", "per_user=true", "seed=9",
        )
        assert rc == 0
        metrics_lines = (outdir / "metrics.csv").read_text().splitlines()
        last_test = [l for l in metrics_lines if l.split(",")[1] == "test"][-1]
        eval_lines = (outdir / "eval.csv").read_text().splitlines()
        assert eval_lines[2].split(",")[2:8] == last_test.split(",")[2:8]
        assert (outdir / "per_user.tsv").exists()
        assert "users_evaluated 16" in out_eval

        # recommendations exclude the train/validation history; the held-out
        # latest item stays eligible (the model is not told the future)
        rc, out_rec, _ = run(
            capsys, "recommend", f"dataset={toy}", f"outdir={outdir}",
            f"checkpoint={outdir}/model.ckpt", "user=user03", "topk=5", "seed=9",
        )
        assert rc == 0
        rec_items = [line.split("\t")[0] for line in out_rec.strip().splitlines()]
        assert len(rec_items) == 5
        known = {f"prod{(3 + 2 * k) % 20:02d}" for k in range(5)}  # ts 100..104
        assert not (set(rec_items) & known)
        scores = [float(line.split("\t")[1]) for line in out_rec.strip().splitlines()]
        assert scores == sorted(scores, reverse=True)

    def test_unknown_user_fails(self, toy, tmp_path, capsys):
        outdir = tmp_path / "run"
        run(capsys, "train", f"dataset={toy}", f"outdir={outdir}", *self.MF_ARGS)
        rc, _, err = run(
            capsys, "recommend", f"dataset={toy}", f"outdir={outdir}",
            f"checkpoint={outdir}/model.ckpt", "user=nobody", "seed=9",
        )
        assert rc == 1 and "nobody" in err

    def test_eval_requires_checkpoint_key(self, toy, tmp_path, capsys):
        rc, _, err = run(capsys, "eval", f"dataset={toy}", f"outdir={tmp_path}")
        assert rc == 1 and "checkpoint" in err

    def test_itempop_training(self, toy, tmp_path, capsys):
        outdir = tmp_path / "pop"
        rc, out, _ = run(
            capsys, "train", f"dataset={toy}", f"outdir={outdir}",
            "variant=itempop", "seed=9",
        )
        assert rc == 0
        spec, tables = load_checkpoint(str(outdir / "model.ckpt"))
        assert spec.K == 1
        assert tables.Q.sum() > 0  # popularity counts, not random values
        lines = (outdir / "metrics.csv").read_text().splitlines()
        assert len(lines) == 3 and lines[1].split(",")[-1] == "nan"

    def test_itempop_recommend_matches_counting_oracle(self, toy, tmp_path, capsys):
        outdir = tmp_path / "pop"
        run(capsys, "train", f"dataset={toy}", f"outdir={outdir}",
            "variant=itempop", "seed=9")
        rc, out_rec, _ = run(
            capsys, "recommend", f"dataset={toy}", f"outdir={outdir}",
            f"checkpoint={outdir}/model.ckpt", "user=user00", "topk=4", "seed=9",
        )
        assert rc == 0
        got = [line.split("\t") for line in out_rec.strip().splitlines()]
        spec, tables = load_checkpoint(str(outdir / "model.ckpt"))
        # oracle: train counts, user00's train+val items removed, ties by index.
        # Q rows follow first-appearance order, so map names through the dataset.
        ds = load_interactions(str(toy))
        counts = {ds.item_ids[i]: tables.Q[i, 0] for i in range(ds.N)}
        known = {f"prod{(0 + 2 * k) % 20:02d}" for k in range(5)}
        expect = sorted(
            (name for name in counts if name not in known),
            key=lambda n: (-counts[n], ds.item_index[n]),
        )[:4]
        assert [name for name, _ in got] == expect
        assert [float(s) for _, s in got] == [counts[n] for n in expect]

    def test_deep_model_roundtrip(self, toy, tmp_path, capsys):
        outdir = tmp_path / "deep"
        rc, _, _ = run(
            capsys, "train", f"dataset={toy}", f"outdir={outdir}",
            "variant=mf", "merge=outer", "head=cnn", "K=4", "C=2",
            "epochs=2", "epochs_pretrain=1", "batch_size=32", "seed=5",
            "lambda3=0.01", "lambda4=0.01",
        )
        assert rc == 0
        spec, _ = load_checkpoint(str(outdir / "model.ckpt"))
        assert spec.head.depth == 2 and spec.head.C == 2

    def test_pretrain_command_then_warm_start(self, toy, tmp_path, capsys):
        pre = tmp_path / "pre"
        rc, out, _ = run(
            capsys, "pretrain", f"dataset={toy}", f"outdir={pre}",
            "variant=mf", "K=4", "epochs_pretrain=2", "batch_size=32", "seed=5",
        )
        assert rc == 0 and (pre / "pretrain.ckpt").exists()
        assert (pre / "pretrain_metrics.csv").exists()

        outdir = tmp_path / "warm"
        rc, _, _ = run(
            capsys, "train", f"dataset={toy}", f"outdir={outdir}",
            f"pretrain_checkpoint={pre}/pretrain.ckpt",
            "variant=mf", "merge=outer", "head=cnn", "K=4", "C=2",
            "epochs=1", "batch_size=32", "seed=5", "lambda3=0.01", "lambda4=0.01",
        )
        assert rc == 0

    def test_warm_start_k_mismatch(self, toy, tmp_path, capsys):
        pre = tmp_path / "pre"
        run(capsys, "pretrain", f"dataset={toy}", f"outdir={pre}",
            "variant=mf", "K=4", "epochs_pretrain=1", "batch_size=32", "seed=5")
        rc, _, err = run(
            capsys, "train", f"dataset={toy}", f"outdir={tmp_path / 'bad'}",
            f"pretrain_checkpoint={pre}/pretrain.ckpt",
            "variant=mf", "merge=outer", "head=cnn", "K=8", "C=2",
            "epochs=1", "seed=5",
        )
        assert rc == 1 and "K=4" in err


class TestDeterminism:
    def test_identical_runs_identical_bytes(self, toy, tmp_path, capsys):
        args = (
            "variant=mf", "merge=outer", "head=cnn", "K=4", "C=2",
            "epochs=2", "epochs_pretrain=1", "batch_size=32", "seed=77",
            "lambda3=0.01", "lambda4=0.01",
        )
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(capsys, "train", f"dataset={toy}", f"outdir={a}", *args)[0] == 0
        assert run(capsys, "train", f"dataset={toy}", f"outdir={b}", *args)[0] == 0
        assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()

    def test_different_seed_different_model(self, toy, tmp_path, capsys):
        base = ("variant=mf", "merge=inner", "head=identity", "K=4",
                "epochs=1", "pretrain=false", "batch_size=32")
        a, b = tmp_path / "a", tmp_path / "b"
        run(capsys, "train", f"dataset={toy}", f"outdir={a}", *base, "seed=1")
        run(capsys, "train", f"dataset={toy}", f"outdir={b}", *base, "seed=2")
        assert (a / "model.ckpt").read_bytes() != (b / "model.ckpt").read_bytes()

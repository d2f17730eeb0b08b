import json
import subprocess
import sys

import pytest

from vgvae.cli import ConfigError, main, merge_settings, read_config, split_settings
from vgvae.synthetic import generate_corpus
from vgvae.trainer import load_checkpoint

SMALL = """# tiny model for fast tests
latent_dim_m = 6
latent_dim_d = 5
embed_dim = 8
lstm_hidden = 5
decoder_hidden = 8
wpl_hidden = 6
batch_size = 16
megabatch_k = 2
dpl_start_epoch = 1
epochs = 1
"""


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    paths = generate_corpus(n_pairs=48, n_dev=20, n_test=20, n_candidates=40, n_queries=12, seed=0).write(d)
    (d / "small.cfg").write_text(SMALL, encoding="utf-8")
    paths["config"] = d / "small.cfg"
    sentences = [" ".join(line.split("\t")[0].split()) for line in paths["pairs"].read_text().splitlines()]
    (d / "sentences.txt").write_text("\n".join(sentences) + "\n", encoding="utf-8")
    paths["sentences"] = d / "sentences.txt"
    return paths


@pytest.fixture(scope="module")
def trained(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "m.ckpt"
    code = main(["train", "--pairs", str(corpus_dir["pairs"]), "--out", str(out), "--config",
                 str(corpus_dir["config"]), "--losses", "prl,dpl,wpl", "--dev", str(corpus_dir["dev"])])
    assert code == 0
    return out


def run(args, capsys):
    code = main([str(a) for a in args])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# configuration handling

def test_read_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("lr = 0.01  # faster\n\nlosses = prl, wpl\nscramble = true\ndev_path = none\n", encoding="utf-8")
    cfg = read_config(p)
    assert cfg == {"lr": 0.01, "losses": frozenset({"prl", "wpl"}), "scramble": True, "dev_path": None}
    model, loss, train, min_count = split_settings(cfg)
    assert loss == {"enabled": frozenset({"prl", "wpl"})} and train["lr"] == 0.01 and min_count == 1


@pytest.mark.parametrize("text", ["colour = red\n", "lr\n", "epochs = many\n", "scramble = maybe\n"])
def test_read_config_errors(tmp_path, text):
    p = tmp_path / "c.cfg"
    p.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigError):
        read_config(p)


def test_merge_precedence(monkeypatch):
    monkeypatch.setenv("VGVAE_SEED", "9")
    assert merge_settings({}, {"seed": None})["seed"] == 9
    assert merge_settings({"seed": 4}, {"seed": None})["seed"] == 4
    assert merge_settings({"seed": 4, "lr": 0.1}, {"seed": 5})["seed"] == 5
    monkeypatch.delenv("VGVAE_SEED")
    assert "seed" not in merge_settings({}, {"seed": None})


# train

def test_train_writes_checkpoint_and_log(trained, corpus_dir):
    ckpt = load_checkpoint(trained)
    assert ckpt.loss_config.enabled == {"prl", "dpl", "wpl"}
    assert ckpt.model_config.latent_dim_m == 6 and ckpt.train_config.epochs == 1
    assert ckpt.best_params is not None
    log = trained.with_name("m.ckpt.log").read_text().splitlines()
    assert len(log) == 3 and log[0].startswith("1\t1\t")


def test_train_base_and_lstm_variants(corpus_dir, tmp_path, capsys):
    out = tmp_path / "base.ckpt"
    code, stdout, _ = run(["train", "--pairs", corpus_dir["pairs"], "--out", out, "--config", corpus_dir["config"],
                           "--losses", ""], capsys)
    assert code == 0 and "steps\t3" in stdout
    assert load_checkpoint(out).loss_config.enabled == frozenset()
    out = tmp_path / "all_lstm.ckpt"
    code, _, _ = run(["train", "--pairs", corpus_dir["pairs"], "--out", out, "--config", corpus_dir["config"],
                      "--losses", "prl,dpl,wpl", "--encoder", "bilstm", "--decoder", "lstm"], capsys)
    cfg = load_checkpoint(out).model_config
    assert code == 0 and (cfg.encoder_kind, cfg.decoder_kind) == ("bilstm", "lstm")


def test_train_baseline(corpus_dir, tmp_path, capsys):
    out = tmp_path / "b.ckpt"
    code, _, _ = run(["train", "--pairs", corpus_dir["pairs"], "--out", out, "--config", corpus_dir["config"],
                      "--baseline", "blstmavg"], capsys)
    ckpt = load_checkpoint(out)
    assert code == 0 and ckpt.model_config.kind == "blstmavg" and ckpt.train_config.scramble
    code, _, _ = run(["eval-sts", "--ckpt", out, "--data", corpus_dir["test"]], capsys)
    assert code == 0


def test_train_byte_identical_stdout(corpus_dir, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        code, stdout, _ = run(["train", "--pairs", corpus_dir["pairs"], "--out", tmp_path / "same.ckpt",
                               "--config", corpus_dir["config"], "--seed", "3"], capsys)
        outs.append((stdout, (tmp_path / "same.ckpt").read_bytes()))
    assert outs[0] == outs[1]


def test_env_seed(corpus_dir, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("VGVAE_SEED", "11")
    run(["train", "--pairs", corpus_dir["pairs"], "--out", tmp_path / "e.ckpt", "--config", corpus_dir["config"]],
        capsys)
    assert load_checkpoint(tmp_path / "e.ckpt").train_config.seed == 11
    run(["train", "--pairs", corpus_dir["pairs"], "--out", tmp_path / "f.ckpt", "--config", corpus_dir["config"],
         "--seed", "2"], capsys)
    assert load_checkpoint(tmp_path / "f.ckpt").train_config.seed == 2


def test_train_error_codes(corpus_dir, tmp_path, capsys):
    pairs, cfg = corpus_dir["pairs"], corpus_dir["config"]
    with pytest.raises(SystemExit) as err:
        main(["train", "--pairs", str(pairs), "--out", str(tmp_path / "x"), "--bogus"])
    assert err.value.code == 2
    assert "usage" in capsys.readouterr().err
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("nonsense_key = 1\n", encoding="utf-8")
    assert run(["train", "--pairs", pairs, "--out", tmp_path / "x", "--config", bad_cfg], capsys)[0] == 2
    assert run(["train", "--pairs", pairs, "--out", tmp_path / "x", "--losses", "prl,xyz"], capsys)[0] == 2
    assert run(["train", "--pairs", pairs, "--out", tmp_path / "x", "--config", tmp_path / "missing.cfg"],
               capsys)[0] == 2
    assert run(["train", "--pairs", tmp_path / "missing.tsv", "--out", tmp_path / "x"], capsys)[0] == 3
    bad = tmp_path / "bad.tsv"
    bad.write_text("one field only\nanother\n", encoding="utf-8")
    assert run(["train", "--pairs", bad, "--out", tmp_path / "x"], capsys)[0] == 3
    empty = tmp_path / "empty.tsv"
    empty.write_text("", encoding="utf-8")
    assert run(["train", "--pairs", empty, "--out", tmp_path / "x"], capsys)[0] == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit(corpus_dir, tmp_path, capsys):
    cfg = tmp_path / "hot.cfg"
    cfg.write_text(SMALL + "lr = 1e300\nclip_norm = 0\n", encoding="utf-8")
    out = tmp_path / "d.ckpt"
    code, _, err = run(["train", "--pairs", corpus_dir["pairs"], "--out", out, "--config", cfg,
                        "--epochs", "3"], capsys)
    assert code == 4 and "diagnostics" in err
    dump = json.loads((tmp_path / "d.ckpt.divergence.json").read_text())
    assert {"step", "epoch", "pair_ids", "x1", "x2"} <= set(dump)


# evaluation commands

def test_eval_sts(trained, corpus_dir, capsys, tmp_path):
    csv_path = tmp_path / "sts.csv"
    code, out, _ = run(["eval-sts", "--ckpt", trained, "--data", corpus_dir["test"], "--variable", "semantic",
                        "--csv", csv_path], capsys)
    assert code == 0 and out.splitlines()[1].startswith("pearson")
    rows = csv_path.read_text().splitlines()
    assert rows[0] == "metric,item_id,value" and len(rows) == 1 + 20 + 1
    code2, out2, _ = run(["eval-sts", "--ckpt", trained, "--data", corpus_dir["test"], "--variable", "semantic",
                          "--csv", csv_path], capsys)
    assert out2 == out
    code, _, _ = run(["eval-sts", "--ckpt", trained, "--data", corpus_dir["test"], "--variable", "syntactic"],
                     capsys)
    assert code == 0 and trained.with_name("m.ckpt.sts.syntactic.csv").exists()


def test_eval_sts_errors(trained, tmp_path, capsys):
    bad = tmp_path / "bad.tsv"
    bad.write_text("a\tb\t9\n", encoding="utf-8")
    assert run(["eval-sts", "--ckpt", trained, "--data", bad], capsys)[0] == 3
    one = tmp_path / "one.tsv"
    one.write_text("a\tb\t3\n", encoding="utf-8")
    assert run(["eval-sts", "--ckpt", trained, "--data", one], capsys)[0] == 3
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"VGV1\x01")
    assert run(["eval-sts", "--ckpt", junk, "--data", one], capsys)[0] == 3


def test_eval_syntax_ted_with_baselines(trained, corpus_dir, capsys):
    args = ["eval-syntax", "--ckpt", trained, "--data", corpus_dir["candidates"], "--queries",
            corpus_dir["queries"], "--task", "ted", "--variable", "syntactic", "--baselines"]
    code, out, _ = run(args, capsys)
    assert code == 0
    rows = dict(line.split()[:2] for line in out.splitlines()[1:])
    model, rand, oracle = float(rows["ted"]), float(rows["random"]), float(rows["oracle"])
    assert oracle <= model and oracle <= rand
    assert run(args, capsys)[1] == out


@pytest.mark.parametrize("task,metric", [("f1", "f1"), ("pos", "pos_acc")])
def test_eval_syntax_bucketed_with_skips(trained, corpus_dir, tmp_path, capsys, task, metric):
    queries = tmp_path / "q.trees"
    text = corpus_dir["queries"].read_text()
    # a one-token query has no same-length candidate
    queries.write_text(text + "(S (UH hello))\n", encoding="utf-8")
    code, out, _ = run(["eval-syntax", "--ckpt", trained, "--data", corpus_dir["candidates"], "--queries", queries,
                        "--task", task, "--baselines"], capsys)
    assert code == 0
    rows = dict(line.split()[:2] for line in out.splitlines()[1:])
    assert rows["skipped"] == "1" and metric in rows and "oracle" in rows


def test_eval_syntax_errors(trained, corpus_dir, tmp_path, capsys):
    bad = tmp_path / "bad.trees"
    bad.write_text("(S (NP a)\n", encoding="utf-8")
    base = ["eval-syntax", "--ckpt", trained, "--task", "ted"]
    assert run(base + ["--data", bad, "--queries", corpus_dir["queries"]], capsys)[0] == 3
    empty = tmp_path / "empty.trees"
    empty.write_text("", encoding="utf-8")
    assert run(base + ["--data", empty, "--queries", corpus_dir["queries"]], capsys)[0] == 3


# nearest neighbours

def test_nn(trained, corpus_dir, capsys, tmp_path):
    first = corpus_dir["sentences"].read_text().splitlines()[0]
    code, out, _ = run(["nn", "--ckpt", trained, "--candidates", corpus_dir["sentences"], "--query", first,
                        "--top", "3"], capsys)
    lines = out.splitlines()
    assert code == 0 and len(lines) == 3
    rank, cos, sentence = lines[0].split("\t")
    assert rank == "1" and cos == "1.0000" and sentence == first
    code, out, _ = run(["nn", "--ckpt", trained, "--candidates", corpus_dir["sentences"], "--query", first,
                        "--top", "0"], capsys)
    assert code == 0 and out == ""
    code, out, _ = run(["nn", "--ckpt", trained, "--candidates", corpus_dir["sentences"], "--query", "dog",
                        "--variable", "syntactic", "--top", "2"], capsys)
    assert code == 0 and len(out.splitlines()) == 2
    empty = tmp_path / "none.txt"
    empty.write_text("\n", encoding="utf-8")
    assert run(["nn", "--ckpt", trained, "--candidates", empty, "--query", "dog"], capsys)[0] == 3


def test_module_entry_point(trained, corpus_dir):
    proc = subprocess.run([sys.executable, "-m", "vgvae", "eval-sts", "--ckpt", str(trained), "--data",
                           str(corpus_dir["test"])], capture_output=True, text=True)
    assert proc.returncode == 0 and "pearson" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "vgvae", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2

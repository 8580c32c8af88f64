import json

import numpy as np
import pytest

import pipeline
from tcts import checkpoint
from tcts.errors import ConfigError, DataContract, IncompatibleCheckpoint
from tcts.harness import (Corpus, ExperimentConfig, Optimizer, TrainReport, evaluate,
                          evaluation_csv, load_checkpoint, run_teacher_as_gt_ablation,
                          save_checkpoint, train_student_rl, train_student_xe, train_teacher)
from tcts.metrics import bleu
from tcts.model import init_params

SMALL = dict(num_records=80, epochs=2, hidden=16)


@pytest.fixture(scope="module")
def small_corpus():
    return Corpus.from_config(ExperimentConfig(**SMALL))


@pytest.fixture(scope="module")
def small_models(small_corpus):
    teacher, _ = train_teacher(ExperimentConfig(mode="teacher", **SMALL), small_corpus)
    student, _ = train_student_xe(ExperimentConfig(mode="xe", **SMALL), None, small_corpus)
    return teacher, student


def test_config_defaults():
    cfg = ExperimentConfig()
    assert (cfg.lambda1, cfg.lambda2, cfg.epochs, cfg.batch_size, cfg.hidden) == (0.2, 0.02, 15, 32, 64)
    assert cfg.base_lr == 5e-3
    assert ExperimentConfig(mode="scst").base_lr == 5e-4
    assert ExperimentConfig(lr=0.1).base_lr == 0.1


@pytest.mark.parametrize("bad", [
    {"mode": "bogus"}, {"lambda1": -0.1}, {"lambda2": -1}, {"epochs": -1}, {"lr": 0.0},
    {"optimizer": "rmsprop"}, {"batch_size": 0},
])
def test_config_rejects_invalid_values(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"mode": "xe", "learning_rate": 0.1}))
    with pytest.raises(ConfigError, match="learning_rate"):
        ExperimentConfig.from_json(path)


def test_config_path_prerequisites():
    with pytest.raises(ConfigError):
        ExperimentConfig(mode="tcts-rl", ckpt_in="x").require_paths()
    with pytest.raises(ConfigError):
        ExperimentConfig(mode="scst").require_paths()
    ExperimentConfig(mode="tcts-rl", ckpt_in="x", teacher_ckpt="y").require_paths()


def test_config_hash_tracks_changes():
    a = ExperimentConfig()
    assert a.hash() == ExperimentConfig().hash() != a.replace(seed=1).hash()


def test_zero_epochs_keeps_initialisation(small_corpus):
    cfg = ExperimentConfig(mode="xe", **{**SMALL, "epochs": 0})
    params, report = train_student_xe(cfg, None, small_corpus)
    rng_init = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[0])
    init = small_corpus.new_params(cfg.hidden, False, rng_init)
    for name in init.names():
        np.testing.assert_array_equal(params.weights[name], init.weights[name])
    assert report.rows == []


def test_report_rows_and_csv(small_corpus, small_models):
    _, report = train_student_xe(ExperimentConfig(mode="xe", **SMALL), None, small_corpus)
    assert [r["epoch"] for r in report.rows] == [1, 2]
    header, *lines = report.to_csv().strip().split("\n")
    assert header.split(",") == list(TrainReport.COLUMNS)
    assert len(lines) == 2
    assert report.config_hash == ExperimentConfig(mode="xe", **SMALL).hash()


def test_same_seed_identical_checkpoint_bytes(small_corpus):
    cfg = ExperimentConfig(mode="teacher", **SMALL)
    a, _ = train_teacher(cfg, small_corpus)
    b, _ = train_teacher(cfg, small_corpus)
    assert checkpoint.to_bytes(a) == checkpoint.to_bytes(b)


def test_checkpoint_round_trip_preserves_evaluation(tmp_path, small_corpus, small_models):
    _, student = small_models
    cfg = ExperimentConfig(mode="xe", **SMALL)
    path = tmp_path / "s.ckpt"
    save_checkpoint(path, student, small_corpus, cfg)
    loaded = load_checkpoint(path, small_corpus)
    before = evaluate(student, small_corpus, "test")[3]
    after = evaluate(loaded, small_corpus, "test")[3]
    assert before == after


def test_checkpoint_layout_and_errors(tmp_path):
    params = init_params(4, 10, 6, 4, False, np.random.default_rng(0))
    blob = checkpoint.to_bytes(params, {"note": "x"})
    assert blob[:8] == b"TCTSCKPT"
    size = int.from_bytes(blob[8:16], "little")
    header = json.loads(blob[16:16 + size])
    assert header["note"] == "x" and header["hidden"] == 4
    assert len(blob) == 16 + size + 8 * params.num_parameters()
    back, _ = checkpoint.from_bytes(blob)
    for name in params.names():
        np.testing.assert_array_equal(back.weights[name], params.weights[name])
    with pytest.raises(IncompatibleCheckpoint):
        checkpoint.from_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(IncompatibleCheckpoint):
        checkpoint.from_bytes(blob + b"\0")


def test_vocab_mismatch_is_rejected(tmp_path, small_corpus, small_models):
    path = tmp_path / "s.ckpt"
    save_checkpoint(path, small_models[1], small_corpus, ExperimentConfig(mode="xe", **SMALL))
    other = Corpus.from_config(ExperimentConfig(**{**SMALL, "seed": 5, "num_records": 60}))
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(path, other)


def test_evaluate_is_deterministic_and_csv_shaped(small_corpus, small_models):
    records, caps, reports, mean = evaluate(small_models[1], small_corpus, "test")
    again = evaluate(small_models[1], small_corpus, "test")
    assert [c.ids for c in caps] == [c.ids for c in again[1]] and mean == again[3]
    assert mean.rouge_l == pytest.approx(np.mean([r.rouge_l for r in reports]))
    lines = evaluation_csv(records, reports).strip().split("\n")
    assert lines[0] == "id,bleu1,bleu2,bleu3,bleu4,rougeL,cider"
    assert len(lines) == len(records) + 1


def test_first_reference_self_match(small_corpus):
    rec = small_corpus.split("test")[0]
    refs = small_corpus.ref_ids(rec)
    assert bleu(refs[0], refs)[0] == 1.0


def test_empty_split_is_a_data_error(small_corpus, small_models):
    tiny = Corpus(small_corpus.split("train")[:10])
    with pytest.raises(DataContract):
        evaluate(small_models[1], tiny, "test")


def test_teacher_needs_attributes(small_corpus):
    records = [r for r in small_corpus.records]
    stripped = Corpus([type(r)(**{**r.__dict__, "attributes": []}) for r in records])
    with pytest.raises(DataContract):
        train_teacher(ExperimentConfig(mode="teacher", **SMALL), stripped)


def test_mode_guards(small_corpus, small_models):
    teacher, student = small_models
    with pytest.raises(ConfigError):
        train_student_xe(ExperimentConfig(mode="tcts-xe", **SMALL), None, small_corpus)
    with pytest.raises(ConfigError):
        train_student_rl(ExperimentConfig(mode="tcts-rl", **SMALL), student, None, small_corpus)
    with pytest.raises(ConfigError):
        train_student_rl(ExperimentConfig(mode="scst", **SMALL), teacher, None, small_corpus)


def test_rl_reports_mean_reward(small_corpus, small_models):
    teacher, student = small_models
    _, rep = train_student_rl(ExperimentConfig(mode="tcts-rl", **SMALL), student, teacher,
                              small_corpus)
    assert len(rep.rows) == 2 and all(r["mean_reward"] is not None for r in rep.rows)
    assert rep.max_reward_mean_gap < 1e-9


def test_teacher_caption_ablation_rows_align(small_corpus, small_models):
    teacher, student = small_models
    out = run_teacher_as_gt_ablation(ExperimentConfig(mode="scst", **SMALL), student, teacher,
                                     small_corpus)
    assert [r["epoch"] for r in out["table"]] == [1, 2]
    assert {"teachercap_val_cider", "onegt_val_cider"} <= set(out["table"][0])


def test_optimizer_sgd_step():
    params = init_params(2, 6, 5, 4, False, np.random.default_rng(0))
    before = params.copy()
    grads = {k: np.ones_like(v) for k, v in params.weights.items()}
    Optimizer("sgd", clip=0.0).step(params, grads, 0.1)
    for k in params.names():
        np.testing.assert_allclose(params.weights[k], before.weights[k] - 0.1)


def test_optimizer_clips_global_norm():
    params = init_params(2, 6, 5, 4, False, np.random.default_rng(0))
    before = params.copy()
    grads = {k: np.full_like(v, 100.0) for k, v in params.weights.items()}
    norm = Optimizer("sgd", clip=5.0).step(params, grads, 1.0)
    delta = np.sqrt(sum(((params.weights[k] - before.weights[k]) ** 2).sum() for k in params.names()))
    assert norm > 5 and delta == pytest.approx(5.0)


# default-config checks; these reuse the acceptance runs when they exist


def test_default_xe_loss_non_increasing_first_epochs():
    losses = [r["train_loss"] for r in pipeline.student_xe(0)[1].rows[:3]]
    assert all(b <= a * 1.05 for a, b in zip(losses, losses[1:]))


def test_default_teacher_beats_student_on_validation():
    t = pipeline.teacher(0)[1].rows[-1]["val_cider"]
    s = pipeline.student_xe(0)[1].rows[-1]["val_cider"]
    assert t > s


def test_default_rl_mean_reward_centred_in_first_epoch():
    rl = pipeline.student_rl(0, "scst")[1]
    assert abs(rl.rows[0]["mean_reward"]) < 0.05


def test_default_rl_improves_val_cider_over_xe():
    xe_val = pipeline.student_xe(0)[1].rows[-1]["val_cider"]
    rl = pipeline.student_rl(0, "scst")[1]
    assert rl.rows[-1]["val_cider"] >= xe_val

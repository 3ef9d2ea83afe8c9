import hashlib
import json
from dataclasses import replace

import numpy as np
import pytest

from trackmon.jepa import (
    CHECKPOINT_SCHEMA_VERSION,
    Checkpoint,
    EncoderConfig,
    MaskedTokenPredictor,
    MaskingConfig,
    PredictorConfig,
    TrackEncoder,
    TrainConfig,
    copy_params,
    ema_update,
    embed_track,
    embed_tracks,
    flop_report,
    mask_timesteps,
    train,
    with_zero_mask_bit,
)
from trackmon.nn.gradcheck import finite_difference_check
from trackmon.nn.layers import l1_loss
from trackmon.nn.serial import load_arrays, save_arrays
from trackmon.objects import (
    DomainError,
    ObjectState,
    ObjectTrack,
    SchemaError,
    fit_stats,
    standardize,
    to_feature_matrix,
)


def tiny_encoder():
    return EncoderConfig(
        n_heads=2, depth=1, width=8, ffn_hidden=16, head_hidden=8, embed_dim=4
    )


def tiny_config(**over):
    base = dict(
        epochs=2,
        learning_rate=1e-3,
        ema_decay=0.9,
        batch_size=4,
        seed=3,
        masking=MaskingConfig(n_masked=2),
        encoder=tiny_encoder(),
        predictor=PredictorConfig(n_heads=2, depth=1, ffn_hidden=8),
    )
    base.update(over)
    return TrainConfig(**base)


def random_tracks(n, seed=0, t_min=8, t_max=14, scene="scene-0"):
    """Tracks with enough spread in every feature for standardization."""
    rng = np.random.default_rng(seed)
    tracks = []
    for i in range(n):
        t_len = int(rng.integers(t_min, t_max + 1))
        t0 = int(rng.integers(0, 5))
        states = tuple(
            ObjectState(
                t=t0 + k,
                x=float(rng.normal(0.0, 10.0)),
                y=float(rng.normal(0.0, 10.0)),
                v=float(rng.uniform(0.0, 12.0)),
                psi=float(rng.uniform(-3.1, 3.1)),
            )
            for k in range(t_len)
        )
        tracks.append(
            ObjectTrack(track_id=f"obj-{i:02d}", scene_id=scene, states=states)
        )
    return tracks


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

def test_mask_blanks_exactly_the_selected_rows():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(12, 4))
    masked, m, unmasked = mask_timesteps(feats, 4, rng)
    assert masked.shape == (12, 5) and unmasked.shape == (12, 5)
    assert m.dtype == np.int64 and m.shape == (4,)
    assert np.all(np.diff(m) > 0)  # ascending and distinct
    sel = np.zeros(12, dtype=bool)
    sel[m] = True
    assert np.array_equal(masked[:, 4], sel.astype(float))
    assert np.all(masked[sel, :4] == 0.0)
    assert np.array_equal(masked[~sel, :4], feats[~sel])
    assert np.array_equal(unmasked[:, :4], feats)
    assert np.all(unmasked[:, 4] == 0.0)


def test_mask_zero_is_the_identity():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(9, 4))
    masked, m, unmasked = mask_timesteps(feats, 0, rng)
    assert m.size == 0
    assert np.array_equal(masked, unmasked)
    assert np.array_equal(masked, with_zero_mask_bit(feats))


def test_mask_can_blank_every_timestep():
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(8, 4))
    masked, m, _ = mask_timesteps(feats, 8, rng)
    assert np.array_equal(m, np.arange(8))
    assert np.all(masked[:, :4] == 0.0)
    assert np.all(masked[:, 4] == 1.0)


def test_mask_rejects_bad_inputs():
    rng = np.random.default_rng(3)
    with pytest.raises(DomainError, match="matrix"):
        mask_timesteps(np.zeros((10, 3)), 2, rng)
    with pytest.raises(DomainError, match="cannot mask"):
        mask_timesteps(np.zeros((10, 4)), 11, rng)
    with pytest.raises(DomainError, match="cannot mask"):
        mask_timesteps(np.zeros((10, 4)), -1, rng)


def test_mask_selection_is_uniform_over_timesteps():
    rng = np.random.default_rng(7)
    feats = np.zeros((10, 4))
    counts = np.zeros(10)
    draws = 4000
    for _ in range(draws):
        _, m, _ = mask_timesteps(feats, 3, rng)
        counts[m] += 1
    freq = counts / draws
    # each timestep should be hit with probability 3/10
    assert np.all(np.abs(freq - 0.3) < 0.03)


def test_zero_mask_bit_column():
    x = np.arange(8.0).reshape(2, 4)
    out = with_zero_mask_bit(x)
    assert out.shape == (2, 5)
    assert np.array_equal(out[:, :4], x)
    assert np.all(out[:, 4] == 0.0)
    assert out.dtype == np.float64


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_train_config_roundtrips_through_plain_dicts():
    cfg = tiny_config()
    data = cfg.to_dict()
    assert data["masking"]["n_masked"] == 2
    assert TrainConfig.from_dict(data) == cfg


def test_train_config_validation():
    with pytest.raises(DomainError, match="epochs"):
        tiny_config(epochs=0)
    with pytest.raises(DomainError, match="learning_rate"):
        tiny_config(learning_rate=0.0)
    with pytest.raises(DomainError, match="ema_decay"):
        tiny_config(ema_decay=1.0)
    with pytest.raises(DomainError, match="ema_decay"):
        tiny_config(ema_decay=0.0)
    with pytest.raises(DomainError, match="n_masked"):
        tiny_config(masking=MaskingConfig(0))
    with pytest.raises(DomainError, match="n_masked"):
        tiny_config(masking=MaskingConfig(8))  # as long as the shortest track
    with pytest.raises(DomainError, match="divisible"):
        tiny_config(predictor=PredictorConfig(n_heads=3, depth=1, ffn_hidden=8))
    with pytest.raises(DomainError, match="n_masked"):
        MaskingConfig(-1)


def test_encoder_config_validation():
    with pytest.raises(DomainError, match="divisible"):
        EncoderConfig(n_heads=3, width=8)
    with pytest.raises(DomainError, match="even"):
        EncoderConfig(n_heads=2, width=10, embed_dim=5)
    with pytest.raises(DomainError, match="depth"):
        EncoderConfig(depth=0)


# ---------------------------------------------------------------------------
# encoder / predictor contracts
# ---------------------------------------------------------------------------

def test_encoder_emits_one_token_per_timestep():
    cfg = tiny_encoder()
    enc = TrackEncoder(cfg, np.random.default_rng(0))
    for t_len in (8, 17, 40):
        x = np.random.default_rng(t_len).normal(size=(2, t_len, 5))
        out = enc.forward(x)
        assert out.shape == (2, t_len, cfg.embed_dim)
        assert np.all(np.isfinite(out))


def test_encoder_rejects_wrong_input_shape():
    enc = TrackEncoder(tiny_encoder(), np.random.default_rng(0))
    with pytest.raises(DomainError, match="encoder expects"):
        enc.forward(np.zeros((2, 9, 4)))
    with pytest.raises(DomainError, match="encoder expects"):
        enc.forward(np.zeros((9, 5)))


def test_predictor_emits_one_token_per_masked_index():
    pred = MaskedTokenPredictor(4, PredictorConfig(2, 1, 8), np.random.default_rng(1))
    ctx = np.random.default_rng(2).normal(size=(3, 10, 4))
    m = np.array([[0, 4, 9], [1, 2, 3], [5, 6, 7]])
    out = pred.forward(ctx, m)
    assert out.shape == (3, 3, 4)
    assert np.all(np.isfinite(out))


def test_predictor_rejects_bad_inputs():
    pred = MaskedTokenPredictor(4, PredictorConfig(2, 1, 8), np.random.default_rng(1))
    ctx = np.random.default_rng(2).normal(size=(3, 10, 4))
    with pytest.raises(DomainError, match="out of range"):
        pred.forward(ctx, np.array([[0, 4, 10]] * 3))
    with pytest.raises(DomainError, match="mask indices"):
        pred.forward(ctx, np.array([0, 1, 2]))
    with pytest.raises(DomainError, match="predictor expects"):
        pred.forward(np.zeros((3, 10, 6)), np.zeros((3, 2), dtype=np.int64))


def test_predictor_width_must_split_across_heads():
    with pytest.raises(DomainError, match="divisible"):
        MaskedTokenPredictor(6, PredictorConfig(4, 1, 8), np.random.default_rng(0))


def test_timestep_order_changes_the_tokens():
    enc = TrackEncoder(tiny_encoder(), np.random.default_rng(3))
    x = np.random.default_rng(4).normal(size=(1, 10, 5))
    out = enc.forward(x)
    out_rev = enc.forward(x[:, ::-1, :])
    # the same state content placed at a different position must encode
    # differently, otherwise position information was dropped
    assert not np.allclose(out[0, 0], out_rev[0, 9], atol=1e-6)


def test_padded_keys_do_not_leak_into_valid_tokens():
    enc = TrackEncoder(tiny_encoder(), np.random.default_rng(5))
    x = np.random.default_rng(6).normal(size=(1, 8, 5))
    padded = np.zeros((1, 12, 5))
    padded[:, :8] = x
    valid = np.zeros((1, 12))
    valid[:, :8] = 1.0
    out = enc.forward(x, np.ones((1, 8)))
    out_padded = enc.forward(padded, valid)
    np.testing.assert_allclose(out_padded[0, :8], out[0], rtol=0, atol=1e-10)


# ---------------------------------------------------------------------------
# EMA target branch
# ---------------------------------------------------------------------------

def test_ema_pulls_target_geometrically_toward_source():
    cfg = tiny_encoder()
    src = TrackEncoder(cfg, np.random.default_rng(0))
    tgt = TrackEncoder(cfg, np.random.default_rng(1))
    src_vals = {n: p.value.copy() for n, p in src.named_params()}
    gaps = {n: p.value - src_vals[n] for n, p in tgt.named_params()}
    decay = 0.99
    milestones = {1, 2, 5, 20, 100}
    for k in range(1, 101):
        ema_update(src, tgt, decay)
        if k in milestones:
            for n, p in tgt.named_params():
                expect = src_vals[n] + decay**k * gaps[n]
                np.testing.assert_allclose(p.value, expect, rtol=0, atol=1e-12)


def test_ema_with_decay_one_is_a_noop():
    cfg = tiny_encoder()
    src = TrackEncoder(cfg, np.random.default_rng(0))
    tgt = TrackEncoder(cfg, np.random.default_rng(1))
    before = {n: p.value.copy() for n, p in tgt.named_params()}
    ema_update(src, tgt, 1.0)
    for n, p in tgt.named_params():
        assert np.array_equal(p.value, before[n])


def test_ema_requires_matching_parameter_names():
    a = TrackEncoder(tiny_encoder(), np.random.default_rng(0))
    b = TrackEncoder(replace(tiny_encoder(), depth=2), np.random.default_rng(1))
    with pytest.raises(DomainError, match="EMA"):
        ema_update(a, b, 0.9)


def test_copy_params_makes_forward_passes_identical():
    cfg = tiny_encoder()
    a = TrackEncoder(cfg, np.random.default_rng(0))
    b = TrackEncoder(cfg, np.random.default_rng(1))
    copy_params(a, b)
    x = np.random.default_rng(2).normal(size=(2, 9, 5))
    assert np.array_equal(a.forward(x), b.forward(x))


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------

def test_gradients_reach_both_branches_but_never_the_target():
    tracks = random_tracks(6, seed=1)
    stats = fit_stats(tracks)
    state = Checkpoint(tiny_config(), stats)
    feats = [standardize(to_feature_matrix(t), stats) for t in tracks[:4]]
    loss = state.training_step(feats)
    assert np.isfinite(loss) and loss > 0
    enc_grad = max(np.abs(p.grad).max() for _, p in state.encoder.named_params())
    pred_grad = max(np.abs(p.grad).max() for _, p in state.predictor.named_params())
    assert enc_grad > 0
    assert pred_grad > 0
    for _, p in state.target.named_params():
        assert np.all(p.grad == 0.0)


def test_target_branch_equals_context_branch_at_initialization():
    tracks = random_tracks(5, seed=2)
    state = Checkpoint(tiny_config(), fit_stats(tracks))
    x = np.random.default_rng(0).normal(size=(2, 9, 5))
    assert np.array_equal(state.encoder.forward(x), state.target.forward(x))


def test_repeated_steps_on_one_batch_reduce_the_loss():
    cfg = tiny_config(learning_rate=1e-2)
    tracks = random_tracks(4, seed=2, t_min=10, t_max=10)
    stats = fit_stats(tracks)
    state = Checkpoint(cfg, stats)
    feats = [standardize(to_feature_matrix(t), stats) for t in tracks]
    losses = [state.training_step(feats) for _ in range(40)]
    assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])


def test_training_step_handles_mixed_lengths():
    tracks = random_tracks(3, seed=4, t_min=8, t_max=14)
    stats = fit_stats(tracks)
    state = Checkpoint(tiny_config(), stats)
    feats = [standardize(to_feature_matrix(t), stats) for t in tracks]
    assert len({f.shape[0] for f in feats}) > 1
    loss = state.training_step(feats)
    assert np.isfinite(loss) and loss > 0


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    enc_cfg = tiny_encoder()
    enc = TrackEncoder(enc_cfg, rng)
    pred = MaskedTokenPredictor(enc_cfg.embed_dim, PredictorConfig(2, 1, 8), rng)
    target = TrackEncoder(enc_cfg, np.random.default_rng(9))

    data_rng = np.random.default_rng(1)
    masked_in = np.zeros((2, 8, 5))
    target_in = np.zeros((2, 8, 5))
    m = np.zeros((2, 2), dtype=np.int64)
    for i in range(2):
        feats = data_rng.normal(size=(8, 4))
        masked_in[i], m[i], target_in[i] = mask_timesteps(feats, 2, data_rng)
    target_sel = np.take_along_axis(target.forward(target_in), m[:, :, None], axis=1)

    def loss_fn():
        return l1_loss(pred.forward(enc.forward(masked_in), m), target_sel)[0]

    enc.zero_grads()
    pred.zero_grads()
    out = pred.forward(enc.forward(masked_in), m)
    loss, d_pred = l1_loss(out, target_sel)
    enc.backward(pred.backward(d_pred))
    # keep every probe away from the L1 kink
    assert np.abs(out - target_sel).min() > 1e-3

    params = [(f"enc.{n}", p) for n, p in enc.named_params()]
    params += [(f"pred.{n}", p) for n, p in pred.named_params()]
    report = finite_difference_check(
        loss_fn, params, h=1e-5, max_coords_per_param=3, rng=np.random.default_rng(2)
    )
    assert report.ok(1e-5), report


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_train_runs_epochs_and_logs_losses():
    tracks = random_tracks(9, seed=3)
    state = train(tracks, tiny_config(epochs=3))
    assert state.epoch == 3
    assert len(state.loss_history) == 3
    assert all(np.isfinite(l) and l > 0 for l in state.loss_history)


def test_train_rejects_empty_input():
    with pytest.raises(DomainError, match="empty"):
        train([], tiny_config())


def test_training_is_deterministic_per_seed():
    tracks = random_tracks(8, seed=4)
    a = train(tracks, tiny_config(epochs=2))
    b = train(tracks, tiny_config(epochs=2))
    assert a.loss_history == b.loss_history
    for (name_a, pa), (name_b, pb) in zip(a._trainable(), b._trainable()):
        assert name_a == name_b
        assert np.array_equal(pa.value, pb.value)
    c = train(tracks, tiny_config(epochs=2, seed=11))
    assert c.loss_history != a.loss_history


def test_train_progress_callback_sees_each_epoch():
    seen = []
    train(
        random_tracks(6, seed=7),
        tiny_config(epochs=2),
        progress=lambda epoch, loss: seen.append(epoch),
    )
    assert seen == [1, 2]


def test_resume_reproduces_an_uninterrupted_run(tmp_path):
    tracks = random_tracks(10, seed=5)
    cfg = tiny_config(epochs=4)
    full = train(tracks, cfg)

    half = train(tracks, replace(cfg, epochs=2))
    half.save(tmp_path / "ck")
    resumed = train(tracks, cfg, resume=Checkpoint.load(tmp_path / "ck"))

    assert resumed.loss_history == full.loss_history
    a, b = full._param_arrays(), resumed._param_arrays()
    assert a.keys() == b.keys()
    for key in a:
        assert np.array_equal(a[key], b[key]), key


def test_resume_rejects_a_different_recipe():
    tracks = random_tracks(6, seed=6)
    state = train(tracks, tiny_config(epochs=1))
    with pytest.raises(DomainError, match="different config"):
        train(tracks, tiny_config(epochs=2, learning_rate=5e-3), resume=state)


# ---------------------------------------------------------------------------
# checkpoint persistence
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_is_exact(tmp_path):
    tracks = random_tracks(7, seed=8)
    state = train(tracks, tiny_config(epochs=2))
    checkpoint_id = state.save(tmp_path / "ck")
    assert checkpoint_id and checkpoint_id == state.checkpoint_id

    loaded = Checkpoint.load(tmp_path / "ck")
    assert loaded.epoch == state.epoch
    assert loaded.loss_history == state.loss_history
    assert loaded.config == state.config
    assert loaded.checkpoint_id == checkpoint_id
    assert loaded.rng.bit_generator.state == state.rng.bit_generator.state
    assert loaded.stats.to_dict() == state.stats.to_dict()
    a, b = state._param_arrays(), loaded._param_arrays()
    assert a.keys() == b.keys()
    for key in a:
        assert np.array_equal(a[key], b[key]), key


def test_checkpoint_id_depends_only_on_parameters(tmp_path):
    state = train(random_tracks(6, seed=9), tiny_config(epochs=1))
    assert state.save(tmp_path / "a") == state.save(tmp_path / "b")


def test_checkpoint_schema_version_is_enforced(tmp_path):
    state = train(random_tracks(6, seed=9), tiny_config(epochs=1))
    state.save(tmp_path / "ck")
    meta_path = tmp_path / "ck" / "meta.json"
    meta = json.loads(meta_path.read_text())
    meta["schema_version"] = CHECKPOINT_SCHEMA_VERSION + 1
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(SchemaError, match="schema"):
        Checkpoint.load(tmp_path / "ck")


def test_checkpoint_detects_modified_parameters(tmp_path):
    state = train(random_tracks(6, seed=9), tiny_config(epochs=1))
    state.save(tmp_path / "ck")
    params_path = tmp_path / "ck" / "params.npz"
    arrays = load_arrays(params_path)
    key = sorted(arrays)[0]
    arrays[key] = arrays[key] + 1e-3
    save_arrays(params_path, arrays)
    with pytest.raises(SchemaError, match="mismatch"):
        Checkpoint.load(tmp_path / "ck")


def test_checkpoint_rejects_unknown_arrays(tmp_path):
    state = train(random_tracks(6, seed=9), tiny_config(epochs=1))
    state.save(tmp_path / "ck")
    params_path = tmp_path / "ck" / "params.npz"
    arrays = load_arrays(params_path)
    arrays["model.bogus"] = np.zeros(3)
    save_arrays(params_path, arrays)
    meta_path = tmp_path / "ck" / "meta.json"
    meta = json.loads(meta_path.read_text())
    meta["checkpoint_id"] = hashlib.sha256(params_path.read_bytes()).hexdigest()[:16]
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(SchemaError, match="unexpected"):
        Checkpoint.load(tmp_path / "ck")


def test_checkpoint_load_requires_both_files(tmp_path):
    with pytest.raises(DomainError, match="no checkpoint"):
        Checkpoint.load(tmp_path / "nope")


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def test_embed_tracks_preserves_order_and_provenance():
    tracks = random_tracks(3, seed=10, t_min=8, t_max=12)
    tracks = [
        replace_label(tracks[0], None),
        replace_label(tracks[1], 0),
        replace_label(tracks[2], 1),
    ]
    state = Checkpoint(tiny_config(), fit_stats(tracks))
    embeddings = embed_tracks(tracks, state)
    assert [e.track_id for e in embeddings] == [t.track_id for t in tracks]
    for emb, track in zip(embeddings, tracks):
        assert emb.values.shape == (len(track.states), 4)
        assert np.all(np.isfinite(emb.values))
        assert emb.scene_id == track.scene_id
        assert emb.label == track.label
        assert emb.checkpoint_id == ""  # never saved


def replace_label(track, label):
    return ObjectTrack(
        track_id=track.track_id,
        scene_id=track.scene_id,
        states=track.states,
        label=label,
    )


def test_embedding_matches_direct_zero_mask_encoding():
    tracks = random_tracks(4, seed=11)
    stats = fit_stats(tracks)
    state = Checkpoint(tiny_config(), stats)
    x = with_zero_mask_bit(standardize(to_feature_matrix(tracks[0]), stats))
    reference = state.encoder.forward(x[None])[0]
    np.testing.assert_array_equal(embed_track(tracks[0], state).values, reference)


def test_batch_composition_does_not_change_embeddings():
    tracks = random_tracks(5, seed=12, t_min=8, t_max=10)
    state = Checkpoint(tiny_config(), fit_stats(tracks))
    solo = [embed_track(t, state).values for t in tracks]
    batched = embed_tracks(tracks, state)
    for single, grouped in zip(solo, batched):
        np.testing.assert_allclose(grouped.values, single, rtol=0, atol=1e-10)


def test_identical_tracks_get_identical_embeddings():
    tracks = random_tracks(3, seed=13)
    twin = ObjectTrack(
        track_id="obj-99",
        scene_id=tracks[0].scene_id,
        states=tracks[0].states,
    )
    state = Checkpoint(tiny_config(), fit_stats(tracks))
    embeddings = embed_tracks([tracks[0], twin], state)
    assert np.array_equal(embeddings[0].values, embeddings[1].values)


def test_embeddings_carry_the_checkpoint_id(tmp_path):
    tracks = random_tracks(6, seed=14)
    state = train(tracks, tiny_config(epochs=1))
    checkpoint_id = state.save(tmp_path / "ck")
    assert embed_track(tracks[0], state).checkpoint_id == checkpoint_id


# ---------------------------------------------------------------------------
# documentation helpers
# ---------------------------------------------------------------------------

def test_flop_report_matches_live_parameter_counts():
    cfg = TrainConfig()
    report = flop_report(cfg)
    rng = np.random.default_rng(0)
    assert report["encoder_params"] == TrackEncoder(cfg.encoder, rng).param_count()
    expected_pred = MaskedTokenPredictor(
        cfg.encoder.embed_dim, cfg.predictor, rng
    ).param_count()
    assert report["predictor_params"] == expected_pred
    assert 0 < report["predictor_params"] < report["encoder_params"]
    assert report["encoder_forward_flops"] > 0
    assert report["predictor_forward_flops"] > 0
    longer = flop_report(cfg, t_len=80)
    assert longer["encoder_forward_flops"] > report["encoder_forward_flops"]

use super::tokenizer::{EOS, SPECIALS};
use super::*;
use crate::numerics::finite_diff_grad;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_tokenizer() -> Tokenizer {
    Tokenizer::from_words(["aa", "bb", "cc", "dd"])
}

fn toy_config(seed: u64) -> ModelConfig {
    ModelConfig {
        layer_count: 2,
        head_count: 2,
        d_model: 8,
        d_mlp: 16,
        vocab_size: SPECIALS + 4,
        max_seq: 16,
        seed,
    }
}

fn toy_state(seed: u64) -> ModelState {
    ModelState::new(toy_config(seed), toy_tokenizer()).unwrap()
}

/// State whose unembedding is all zeros, so every logits row is uniform.
fn uniform_logit_state() -> ModelState {
    let state = toy_state(1);
    let mut params = state.params().clone();
    let d = state.config().d_model;
    let vocab = state.config().vocab_size;
    params.insert("unemb".into(), Tensor::Mat(Matrix::zeros(vocab, d)));
    ModelState::from_parts(state.config().clone(), params, 0, toy_tokenizer())
}

#[test]
fn config_validation() {
    let mut cfg = toy_config(0);
    assert!(cfg.validate().is_ok());
    cfg.head_count = 3; // 8 % 3 != 0
    assert!(cfg.validate().is_err());
    cfg = toy_config(0);
    cfg.vocab_size = 3;
    assert!(cfg.validate().is_err());
}

#[test]
fn forward_zero_delta_matches_plain() {
    let state = toy_state(7);
    let tokens = [1u32, 4, 5, 6];
    let (plain, _) = forward(&state, &tokens, &[], &[]).unwrap();
    let iv = Intervention {
        layer: 1,
        position: 2,
        delta: Vector::zeros(8),
    };
    let (with_zero, _) = forward(&state, &tokens, &[iv], &[]).unwrap();
    assert_eq!(plain, with_zero);
}

#[test]
fn forward_delta_at_last_layer_last_position_is_local() {
    let state = toy_state(7);
    let tokens = [1u32, 4, 5, 6];
    let (plain, _) = forward(&state, &tokens, &[], &[]).unwrap();
    let mut delta = Vector::zeros(8);
    delta[0] = 0.5;
    delta[3] = -0.25;
    let iv = Intervention {
        layer: 1, // final layer of a 2-layer stack
        position: 3,
        delta,
    };
    let (bumped, _) = forward(&state, &tokens, &[iv], &[]).unwrap();
    for pos in 0..3 {
        assert_eq!(plain.row(pos), bumped.row(pos), "position {pos} changed");
    }
    assert_ne!(plain.row(3), bumped.row(3));
}

#[test]
fn causality_prefix_logits_ignore_suffix() {
    let state = toy_state(9);
    let (a, _) = forward(&state, &[1, 4, 5, 6], &[], &[]).unwrap();
    let (b, _) = forward(&state, &[1, 4, 5, 7], &[], &[]).unwrap();
    for pos in 0..3 {
        assert_eq!(a.row(pos), b.row(pos));
    }
}

#[test]
fn causality_early_intervention_only_affects_suffix() {
    let state = toy_state(9);
    let tokens = [1u32, 4, 5, 6];
    let mut delta = Vector::zeros(8);
    delta[1] = 1.0;
    let iv = Intervention {
        layer: 0,
        position: 2,
        delta,
    };
    let (plain, _) = forward(&state, &tokens, &[], &[]).unwrap();
    let (bumped, _) = forward(&state, &tokens, &[iv], &[]).unwrap();
    for pos in 0..2 {
        assert_eq!(plain.row(pos), bumped.row(pos));
    }
    assert_ne!(plain.row(2), bumped.row(2));
}

#[test]
fn capture_sees_intervention_exactly_additively() {
    let state = toy_state(11);
    let tokens = [1u32, 4, 5];
    let mut delta = Vector::zeros(8);
    for (i, v) in delta.data_mut().iter_mut().enumerate() {
        *v = 0.1 * (i as f64 + 1.0);
    }
    let (_, base) = forward(&state, &tokens, &[], &[(0, 1)]).unwrap();
    let iv = Intervention {
        layer: 0,
        position: 1,
        delta: delta.clone(),
    };
    let (_, bumped) = forward(&state, &tokens, &[iv], &[(0, 1)]).unwrap();
    let expect = base[0].hidden.add(&delta);
    assert_eq!(bumped[0].hidden, expect, "capture is not base + delta");
    // the mlp key at the same layer is computed before the intervention point
    assert_eq!(bumped[0].mlp_key, base[0].mlp_key);
}

#[test]
fn forward_rejects_bad_inputs() {
    let state = toy_state(3);
    assert!(forward(&state, &[], &[], &[]).is_err());
    assert!(forward(&state, &[200], &[], &[]).is_err());
    let iv = Intervention {
        layer: 5,
        position: 0,
        delta: Vector::zeros(8),
    };
    assert!(forward(&state, &[1, 4], &[iv], &[]).is_err());
    let iv = Intervention {
        layer: 0,
        position: 9,
        delta: Vector::zeros(8),
    };
    assert!(forward(&state, &[1, 4], &[iv], &[]).is_err());
    assert!(forward(&state, &[1, 4], &[], &[(0, 7)]).is_err());
    let long = vec![1u32; 17];
    assert!(matches!(
        forward(&state, &long, &[], &[]),
        Err(crate::Error::SequenceOverflow { .. })
    ));
}

#[test]
fn logprob_uniform_is_log_inv_vocab() {
    let state = uniform_logit_state();
    let vocab = state.config().vocab_size as f64;
    let lp = logprob_sequence(&state, &[1, 4], &[5], &[]).unwrap();
    assert!((lp - (1.0 / vocab).ln()).abs() < 1e-12);
    // additivity over two target tokens
    let lp2 = logprob_sequence(&state, &[1, 4], &[5, 6], &[]).unwrap();
    assert!((lp2 - 2.0 * (1.0 / vocab).ln()).abs() < 1e-12);
}

#[test]
fn logprob_is_nonpositive() {
    let state = toy_state(13);
    let lp = logprob_sequence(&state, &[1, 4, 5], &[6, 7], &[]).unwrap();
    assert!(lp <= 0.0);
}

#[test]
fn delta_gradient_matches_finite_differences() {
    let state = toy_state(17);
    let prompt = [1u32, 4, 5];
    let target = [6u32, 7];
    let (layer, position) = (0usize, 2usize);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..5 {
        let delta = Vector::from(
            (0..8)
                .map(|_| rng.gen_range(-0.5..0.5))
                .collect::<Vec<f64>>(),
        );
        let (_, analytic) =
            target_nll_and_delta_grad(&state, &prompt, &target, layer, position, &delta).unwrap();
        let numeric = finite_diff_grad(
            |d: &Vector| {
                let (nll, _) =
                    target_nll_and_delta_grad(&state, &prompt, &target, layer, position, d)?;
                Ok(nll)
            },
            &delta,
            1e-5,
        )
        .unwrap();
        let diff = analytic.sub(&numeric).norm();
        let scale = analytic.norm().max(1e-12);
        assert!(
            diff / scale <= 1e-3,
            "relative gradient error {}",
            diff / scale
        );
    }
}

#[test]
fn nll_agrees_with_logprob() {
    let state = toy_state(19);
    let prompt = [1u32, 4];
    let target = [5u32, 6];
    let delta = Vector::from(vec![0.1; 8]);
    let iv = Intervention {
        layer: 1,
        position: 1,
        delta: delta.clone(),
    };
    let lp = logprob_sequence(&state, &prompt, &target, &[iv]).unwrap();
    let (nll, _) = target_nll_and_delta_grad(&state, &prompt, &target, 1, 1, &delta).unwrap();
    assert!((nll + lp).abs() < 1e-10);
}

#[test]
fn param_gradient_matches_finite_differences() {
    let state = toy_state(23);
    let tokens = [1u32, 4, 5, 6, 2];
    let mut grads = ParamGrads::new();
    sequence_nll_and_param_grads(&state, &tokens, &mut grads).unwrap();

    // Spot-check a few coordinates of different parameter kinds.
    let picks: [(&str, usize); 4] = [
        ("layer0.mlp.w_out", 5),
        ("layer1.attn.wq", 11),
        ("layer0.ln2.g", 3),
        ("unemb", 20),
    ];
    let eps = 1e-6;
    for (name, flat_idx) in picks {
        let analytic = match grads.map.get(name).unwrap() {
            Tensor::Mat(m) => m.data()[flat_idx],
            Tensor::Vec(v) => v.data()[flat_idx],
        };
        let mut eval_at = |offset: f64| -> f64 {
            let mut params = state.params().clone();
            match params.get_mut(name).unwrap() {
                Tensor::Mat(m) => m.data_mut()[flat_idx] += offset,
                Tensor::Vec(v) => v.data_mut()[flat_idx] += offset,
            }
            let probe = ModelState::from_parts(
                state.config().clone(),
                params,
                0,
                state.tokenizer().clone(),
            );
            let mut g = ParamGrads::new();
            sequence_nll_and_param_grads(&probe, &tokens, &mut g).unwrap().0
        };
        let numeric = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps);
        assert!(
            (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(1.0),
            "{name}[{flat_idx}]: analytic {analytic} vs numeric {numeric}"
        );
    }
}

#[test]
fn mlp_weight_round_trip_is_identity() {
    let state = toy_state(29);
    let w = state.get_mlp_out_weight(1).unwrap();
    let next = state.set_mlp_out_weight(1, w).unwrap();
    assert_eq!(next.version(), state.version() + 1);
    let tokens = [1u32, 4, 5];
    let (a, _) = forward(&state, &tokens, &[], &[]).unwrap();
    let (b, _) = forward(&next, &tokens, &[], &[]).unwrap();
    assert_eq!(a, b);
    assert!(next.param_diff(&state).is_empty());
}

#[test]
fn mlp_weight_update_touches_single_parameter() {
    let state = toy_state(29);
    let mut w = state.get_mlp_out_weight(0).unwrap();
    w.set(0, 0, w.get(0, 0) + 0.125);
    let next = state.set_mlp_out_weight(0, w).unwrap();
    assert_eq!(next.param_diff(&state), vec!["layer0.mlp.w_out".to_string()]);
}

#[test]
fn mlp_weight_shape_mismatch_errors() {
    let state = toy_state(29);
    assert!(state.set_mlp_out_weight(0, Matrix::zeros(3, 3)).is_err());
    assert!(state.get_mlp_out_weight(99).is_err());
}

#[test]
fn edited_weight_moves_target_logprob() {
    // With a computed rank-1 bump toward a token's unembedding row, the
    // log-prob of that token should go up on the probe prompt.
    let state = toy_state(31);
    let tokens = [1u32, 4, 5];
    let target = [6u32];
    let before = logprob_sequence(&state, &tokens, &target, &[]).unwrap();

    let (_, caps) = forward(&state, &tokens, &[], &[(1, 2)]).unwrap();
    let key = &caps[0].mlp_key;
    let unemb_row = Vector::from(state.mat("unemb").row(6).to_vec());
    let bump = unemb_row.outer(key).scale(0.5 / key.dot(key));
    let w = state.get_mlp_out_weight(1).unwrap().add(&bump).unwrap();
    let edited = state.set_mlp_out_weight(1, w).unwrap();
    let after = logprob_sequence(&edited, &tokens, &target, &[]).unwrap();
    assert!(
        after > before,
        "logprob did not increase: {before} -> {after}"
    );
}

#[test]
fn generate_single_step_is_argmax() {
    let state = toy_state(37);
    let prompt = [1u32, 4];
    let (logits, _) = forward(&state, &prompt, &[], &[]).unwrap();
    let last = logits.row(1);
    let argmax = (0..last.len()).max_by(|&a, &b| last[a].total_cmp(&last[b])).unwrap();
    let out = generate(&state, &prompt, 1, 0).unwrap();
    if argmax == EOS as usize {
        assert!(out.is_empty());
    } else {
        assert_eq!(out, vec![argmax as TokenId]);
    }
}

#[test]
fn generate_stops_on_eos() {
    // Bias the unembedding so EOS always wins.
    let state = toy_state(37);
    let mut params = state.params().clone();
    let mut unemb = state.mat("unemb").clone();
    for j in 0..unemb.cols() {
        unemb.set(EOS as usize, j, 0.0);
    }
    let d = unemb.cols();
    params.insert("unemb".into(), {
        let mut m = Matrix::zeros(unemb.rows(), d);
        for j in 0..d {
            m.set(EOS as usize, j, 10.0);
        }
        Tensor::Mat(m)
    });
    let eos_state =
        ModelState::from_parts(state.config().clone(), params, 0, toy_tokenizer());
    let out = generate(&eos_state, &[1, 4], 10, 0).unwrap();
    assert!(out.is_empty());
}

#[test]
fn generate_is_deterministic() {
    let state = toy_state(41);
    let a = generate(&state, &[1, 4, 5], 8, 123).unwrap();
    let b = generate(&state, &[1, 4, 5], 8, 123).unwrap();
    assert_eq!(a, b);
}

#[test]
fn init_is_seed_deterministic() {
    let a = toy_state(55);
    let b = toy_state(55);
    assert_eq!(a, b);
    let c = toy_state(56);
    assert_ne!(a, c);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let state = toy_state(61);
    let state = state
        .set_mlp_out_weight(0, state.get_mlp_out_weight(0).unwrap())
        .unwrap(); // version 1
    save_checkpoint(&state, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, state);
    assert_eq!(loaded.version(), 1);
    // identical bytes when saved again
    let path2 = dir.path().join("model2.ckpt");
    save_checkpoint(&loaded, &path2).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&path2).unwrap()
    );
}

#[test]
fn checkpoint_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(crate::Error::BadCheckpoint(_))
    ));
}

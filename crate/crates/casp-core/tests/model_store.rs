//! Checkpoint format, calibration files, and toy forward pass.

use casp_core::model::{
    checkpoint_from_bytes, checkpoint_to_bytes, evaluate_ppl, forward_collect,
    generate_calibration, generate_toy_model, load_calibration, load_checkpoint,
    save_calibration, save_checkpoint, CalibGenParams, CalibrationSet, ModelCheckpoint, Tensor,
    TensorRepr, ToyModelParams, TransformerConfig,
};
use casp_core::quant::{quantize_rtn, quantize_vq};

fn cfg(d: usize, layers: usize, vocab: usize) -> TransformerConfig {
    TransformerConfig {
        d,
        n_layers: layers,
        n_heads: 1,
        vocab_size: vocab,
        max_seq_len: 64,
    }
}

fn toy(seed: u64) -> ModelCheckpoint {
    generate_toy_model(&ToyModelParams::new(cfg(8, 2, 16), seed)).unwrap()
}

fn tensors_equal(a: &ModelCheckpoint, b: &ModelCheckpoint) -> bool {
    if a.embedding != b.embedding {
        return false;
    }
    a.layers.iter().zip(&b.layers).all(|(la, lb)| {
        la.slots()
            .iter()
            .zip(lb.slots())
            .all(|((_, ra), (_, rb))| match (ra, rb) {
                (TensorRepr::Dense(ta), TensorRepr::Dense(tb)) => ta == tb,
                _ => false,
            })
    })
}

#[test]
fn save_load_round_trip_identity_seed42() {
    let model = toy(42);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.caspkpt");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert!(tensors_equal(&model, &loaded));
    assert_eq!(model.config, loaded.config);

    // Re-serialization is byte-identical.
    assert_eq!(
        checkpoint_to_bytes(&model).unwrap(),
        checkpoint_to_bytes(&loaded).unwrap()
    );
}

#[test]
fn empty_model_rejected() {
    let mut model = toy(1);
    model.layers.clear();
    model.config.n_layers = 0;
    let err = checkpoint_to_bytes(&model).unwrap_err();
    assert!(err.to_string().contains("empty model"), "{err}");
}

#[test]
fn corrupted_payload_trips_checksum() {
    let model = toy(3);
    let mut bytes = checkpoint_to_bytes(&model).unwrap();
    // Flip one payload byte somewhere inside the first tensor's data.
    let idx = bytes.len() / 2;
    bytes[idx] ^= 0x40;
    let err = checkpoint_from_bytes(&bytes).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
}

#[test]
fn wrong_magic_rejected() {
    let model = toy(3);
    let mut bytes = checkpoint_to_bytes(&model).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    let err = checkpoint_from_bytes(&bytes).unwrap_err();
    assert!(err.to_string().contains("not a CASP checkpoint"), "{err}");
}

#[test]
fn unsupported_version_rejected() {
    let model = toy(3);
    let mut bytes = checkpoint_to_bytes(&model).unwrap();
    bytes[4..8].copy_from_slice(&999u32.to_le_bytes());
    // Fix up the checksum so the version check itself is exercised.
    let body_len = bytes.len() - 4;
    let crc = crc32fast::hash(&bytes[..body_len]);
    bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
    let err = checkpoint_from_bytes(&bytes).unwrap_err();
    assert!(err.to_string().contains("unsupported version 999"), "{err}");
}

#[test]
fn truncated_file_rejected() {
    let model = toy(3);
    let bytes = checkpoint_to_bytes(&model).unwrap();
    let err = checkpoint_from_bytes(&bytes[..bytes.len() / 3]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("truncated") || msg.contains("checksum"), "{msg}");
}

#[test]
fn round_trip_preserves_lowrank_and_quantized_slots() {
    let mut model = toy(5);
    // Low-rank slot with dense factors.
    let a = Tensor::new(8, 2, (0..16).map(|i| i as f32 * 0.25).collect()).unwrap();
    let b = Tensor::new(2, 8, (0..16).map(|i| 1.0 - i as f32 * 0.125).collect()).unwrap();
    model.layers[0].w_q = TensorRepr::LowRank {
        a: casp_core::model::FactorStore::Dense(a),
        b: casp_core::model::FactorStore::Dense(b),
        rank: 2,
    };
    // Quantized slots in both grid and codebook schemes.
    let wv = match &model.layers[0].w_v {
        TensorRepr::Dense(t) => t.clone(),
        _ => unreachable!(),
    };
    model.layers[0].w_v = TensorRepr::Quantized(quantize_rtn(&wv, 3, 16).unwrap());
    let wo = match &model.layers[1].w_o {
        TensorRepr::Dense(t) => t.clone(),
        _ => unreachable!(),
    };
    model.layers[1].w_o = TensorRepr::Quantized(quantize_vq(&wo, 2, 4, 11).unwrap());

    let bytes = checkpoint_to_bytes(&model).unwrap();
    let loaded = checkpoint_from_bytes(&bytes).unwrap();
    assert_eq!(bytes, checkpoint_to_bytes(&loaded).unwrap());

    // Dequantized views must agree exactly.
    let orig_wv = model.layers[0].w_v.materialize().unwrap();
    let back_wv = loaded.layers[0].w_v.materialize().unwrap();
    assert_eq!(orig_wv, back_wv);
    let orig_wo = model.layers[1].w_o.materialize().unwrap();
    let back_wo = loaded.layers[1].w_o.materialize().unwrap();
    assert_eq!(orig_wo, back_wo);
}

#[test]
fn param_count_follows_active_representation() {
    let model = toy(7);
    let layer = &model.layers[0];
    assert_eq!(layer.w_q.param_count(), 64);
    let lr = TensorRepr::LowRank {
        a: casp_core::model::FactorStore::Dense(Tensor::zeros(8, 3)),
        b: casp_core::model::FactorStore::Dense(Tensor::zeros(3, 8)),
        rank: 3,
    };
    assert_eq!(lr.param_count(), 3 * 16);
    assert_eq!(layer.dense_param_count(), 4 * 64 + 2 * 8 * 32);
}

#[test]
fn calibration_round_trip_and_size_check() {
    let calib = generate_calibration(&CalibGenParams::new(32, 6, 10, 99)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.casptok");
    save_calibration(&calib, &path).unwrap();
    let loaded = load_calibration(&path).unwrap();
    assert_eq!(calib.sequences, loaded.sequences);
    assert_eq!(loaded.vision_prefix, 0);

    // Truncated file is rejected.
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(load_calibration(&path).is_err());
}

#[test]
fn forward_collect_is_deterministic() {
    let model = toy(11);
    let calib = generate_calibration(&CalibGenParams::new(16, 4, 12, 5)).unwrap();
    let a = forward_collect(&model, &calib).unwrap();
    let b = forward_collect(&model, &calib).unwrap();
    for (la, lb) in a.iter().zip(&b) {
        assert_eq!(la.x_in.x, lb.x_in.x);
        assert_eq!(la.x_out.x, lb.x_out.x);
    }
}

#[test]
fn forward_collect_shapes() {
    let model = toy(2);
    let calib = CalibrationSet::new(vec![vec![1, 2, 3, 4]], 4, 0).unwrap();
    let acts = forward_collect(&model, &calib).unwrap();
    assert_eq!(acts.len(), 2);
    for la in &acts {
        assert_eq!(la.x_in.x.shape(), (4, 8));
        assert_eq!(la.x_out.x.shape(), (4, 8));
    }
}

#[test]
fn token_out_of_vocab_rejected() {
    let model = toy(2);
    let calib = CalibrationSet::new(vec![vec![1, 99, 3, 4]], 4, 0).unwrap();
    assert!(forward_collect(&model, &calib).is_err());
}

#[test]
fn single_token_block_matches_scalar_reimplementation() {
    let model = toy(7);
    let calib = CalibrationSet::new(vec![vec![3]], 1, 0).unwrap();
    let acts = forward_collect(&model, &calib).unwrap();

    // Straight-line scalar recomputation of block 0 for one token.
    let d = 8usize;
    let hidden = 32usize;
    let emb: Vec<f64> = (0..d)
        .map(|c| f64::from(model.embedding.get(3, c)))
        .collect();
    let rms = |v: &[f64]| {
        let ms: f64 = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        (ms + 1e-6).sqrt()
    };
    let layer = &model.layers[0];
    let mat = |r: &TensorRepr| r.materialize().unwrap();
    let (wq, wk, wv, wo, up, down) = (
        mat(&layer.w_q),
        mat(&layer.w_k),
        mat(&layer.w_v),
        mat(&layer.w_o),
        mat(&layer.mlp_up),
        mat(&layer.mlp_down),
    );
    let _ = (wq, wk); // a single token attends only to itself: ctx = v
    let r1 = rms(&emb);
    let normed: Vec<f64> = emb.iter().map(|x| x / r1).collect();
    let mut v = vec![0.0; d];
    for j in 0..d {
        for m in 0..d {
            v[j] += normed[m] * wv[(m, j)];
        }
    }
    let mut attn_out = vec![0.0; d];
    for j in 0..d {
        for m in 0..d {
            attn_out[j] += v[m] * wo[(m, j)];
        }
    }
    let h: Vec<f64> = emb.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
    let r2 = rms(&h);
    let hn: Vec<f64> = h.iter().map(|x| x / r2).collect();
    let mut act = vec![0.0; hidden];
    for j in 0..hidden {
        for m in 0..d {
            act[j] += hn[m] * up[(m, j)];
        }
        let x = act[j];
        let c = (2.0f64 / std::f64::consts::PI).sqrt();
        act[j] = 0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh());
    }
    let mut x_out = h.clone();
    for j in 0..d {
        for m in 0..hidden {
            x_out[j] += act[m] * down[(m, j)];
        }
    }

    for j in 0..d {
        let got = acts[0].x_out.x[(0, j)];
        let rel = (got - x_out[j]).abs() / x_out[j].abs().max(1e-9);
        assert!(rel <= 1e-5, "col {j}: got {got}, oracle {}", x_out[j]);
    }
}

#[test]
fn ppl_uniform_model_equals_vocab() {
    let mut model = toy(4);
    // Zero embedding: logits are identically zero, the predictor is uniform.
    model.embedding = Tensor::zeros(16, 8);
    let held = CalibrationSet::new(vec![vec![1, 2, 3, 4, 5, 6, 7, 0]], 8, 0).unwrap();
    let ppl = evaluate_ppl(&model, &held).unwrap();
    assert!((ppl - 16.0).abs() <= 1e-3, "ppl = {ppl}");
}

#[test]
fn ppl_perfect_predictor_is_one() {
    // Orthogonal huge embeddings + identity blocks (all-zero weights) make
    // the tied head a saturated copy of the current token.
    let config = cfg(8, 1, 4);
    let mut emb = vec![0.0f32; 4 * 8];
    for t in 0..4 {
        emb[t * 8 + t] = 40.0;
    }
    let zeros_layer = casp_core::model::LayerWeights {
        w_q: TensorRepr::Dense(Tensor::zeros(8, 8)),
        w_k: TensorRepr::Dense(Tensor::zeros(8, 8)),
        w_v: TensorRepr::Dense(Tensor::zeros(8, 8)),
        w_o: TensorRepr::Dense(Tensor::zeros(8, 8)),
        mlp_up: TensorRepr::Dense(Tensor::zeros(8, 32)),
        mlp_down: TensorRepr::Dense(Tensor::zeros(32, 8)),
    };
    let model = ModelCheckpoint {
        config,
        embedding: Tensor::new(4, 8, emb).unwrap(),
        layers: vec![zeros_layer],
        format_version: 1,
    };
    let held = CalibrationSet::new(vec![vec![2; 16]], 16, 0).unwrap();
    let ppl = evaluate_ppl(&model, &held).unwrap();
    assert!((ppl - 1.0).abs() <= 1e-9, "ppl = {ppl}");
}

#[test]
fn ppl_quarter_probability_is_four() {
    let mut model = toy(4);
    model.config.vocab_size = 4;
    model.embedding = Tensor::zeros(4, 8);
    let held = CalibrationSet::new(vec![vec![1, 2]], 2, 0).unwrap();
    let ppl = evaluate_ppl(&model, &held).unwrap();
    assert!((ppl - 4.0).abs() <= 1e-9, "ppl = {ppl}");
}

#[test]
fn ppl_needs_two_tokens() {
    let model = toy(4);
    let held = CalibrationSet::new(vec![vec![1]], 1, 0).unwrap();
    assert!(evaluate_ppl(&model, &held).is_err());
}

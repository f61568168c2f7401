use super::*;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers_enc: 1,
        n_layers_dec: 1,
        hidden: 8,
        n_heads: 2,
        ffn_dim: 16,
        max_len: 4,
        n_timesteps: 3,
        dropout: 0.0,
        vocab_size: 7,
        n_langs: 2,
    }
}

fn seq(enc: &[u32], dec: &[u32], t: usize) -> SequenceInput {
    SequenceInput {
        encoder: Segment::monolingual(enc.to_vec(), 0),
        decoder: Segment::monolingual(dec.to_vec(), 1),
        timestep: t,
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

#[test]
fn parameter_count_formula_matches_traversal() {
    let toy = ModelConfig::toy(12, 2, 20);
    let m = build_model(&toy, 0).unwrap();
    assert_eq!(m.num_parameters(), toy.parameter_count());
    let full = ModelConfig::full(40_000, 2, 20);
    let m = build_model(&full, 0).unwrap();
    assert_eq!(m.num_parameters(), full.parameter_count());
}

#[test]
fn toy_smoke_on_length_one() {
    let m = build_model(&ModelConfig::toy(12, 2, 20), 3).unwrap();
    let input = ModelInput::from_sequences(&[seq(&[5], &[3], 20)]).unwrap();
    let out = m.forward(&input, ForwardMode::Eval).unwrap();
    assert_eq!(out.logits.dims(), &[1, 1, 12]);
    assert_eq!(out.length_logits.dims(), &[1, 64]);
}

#[test]
fn invalid_config_is_refused() {
    let mut c = tiny_config();
    c.hidden = 9;
    assert!(matches!(build_model(&c, 0), Err(Error::Config(_))));
}

#[test]
fn same_seed_same_outputs() {
    let input = ModelInput::from_sequences(&[seq(&[4, 5, 6], &[3, 3], 2)]).unwrap();
    let a = build_model(&tiny_config(), 11).unwrap();
    let b = build_model(&tiny_config(), 11).unwrap();
    let c = build_model(&tiny_config(), 12).unwrap();
    let oa = a.forward(&input, ForwardMode::Eval).unwrap();
    assert_eq!(max_abs_diff(&oa.logits, &b.forward(&input, ForwardMode::Eval).unwrap().logits), 0.0);
    assert_eq!(max_abs_diff(&oa.logits, &a.forward(&input, ForwardMode::Eval).unwrap().logits), 0.0);
    assert!(max_abs_diff(&oa.logits, &c.forward(&input, ForwardMode::Eval).unwrap().logits) > 0.0);
    assert_eq!(a.param_hash().unwrap(), b.param_hash().unwrap());
}

#[test]
fn dropout_only_in_train_mode() {
    let mut cfg = tiny_config();
    cfg.dropout = 0.5;
    let m = build_model(&cfg, 1).unwrap();
    let input = ModelInput::from_sequences(&[seq(&[4, 5, 6], &[3, 3, 2], 1)]).unwrap();
    let e1 = m.forward(&input, ForwardMode::Eval).unwrap().logits;
    let e2 = m.forward(&input, ForwardMode::Eval).unwrap().logits;
    assert_eq!(max_abs_diff(&e1, &e2), 0.0);
    let t1 = m.forward(&input, ForwardMode::Train { seed: 5 }).unwrap().logits;
    let t2 = m.forward(&input, ForwardMode::Train { seed: 5 }).unwrap().logits;
    let t3 = m.forward(&input, ForwardMode::Train { seed: 6 }).unwrap().logits;
    assert_eq!(max_abs_diff(&t1, &t2), 0.0);
    assert!(max_abs_diff(&t1, &t3) > 0.0);
    assert!(max_abs_diff(&t1, &e1) > 0.0);
}

#[test]
fn padding_content_does_not_leak() {
    let m = build_model(&tiny_config(), 2).unwrap();
    // Second sequence is longer so the first one is padded on both sides.
    let mut input = ModelInput::from_sequences(&[seq(&[4, 5], &[3], 1), seq(&[4, 5, 6, 6], &[2, 3, 4], 2)]).unwrap();
    let before = m.forward(&input, ForwardMode::Eval).unwrap();
    for i in 0..input.encoder.ids.len() {
        if !input.encoder.real[i] {
            input.encoder.ids[i] = 6;
            input.encoder.positions[i] = 3;
            input.encoder.langs[i] = 1;
        }
    }
    for i in 0..input.decoder.ids.len() {
        if !input.decoder.real[i] {
            input.decoder.ids[i] = 5;
            input.decoder.positions[i] = 2;
        }
    }
    let after = m.forward(&input, ForwardMode::Eval).unwrap();
    let real0 = |t: &Tensor| t.get(0).unwrap().narrow(0, 0, 1).unwrap();
    assert!(max_abs_diff(&real0(&before.logits), &real0(&after.logits)) < 1e-6);
    assert!(max_abs_diff(&before.length_logits, &after.length_logits) < 1e-6);
}

#[test]
fn batching_matches_single_sequences() {
    let m = build_model(&tiny_config(), 8).unwrap();
    let a = seq(&[4, 5], &[3, 2], 1);
    let b = seq(&[6, 5, 4], &[2, 3, 4], 2);
    let both = m.forward(&ModelInput::from_sequences(&[a.clone(), b]).unwrap(), ForwardMode::Eval).unwrap();
    let alone = m.forward(&ModelInput::from_sequences(&[a]).unwrap(), ForwardMode::Eval).unwrap();
    let first = both.logits.get(0).unwrap().narrow(0, 0, 2).unwrap();
    assert!(max_abs_diff(&first, &alone.logits.get(0).unwrap()) < 1e-5);
}

#[test]
fn language_embedding_is_live() {
    let m = build_model(&ModelConfig::toy(12, 2, 20), 4).unwrap();
    let mut input = ModelInput::from_sequences(&[seq(&[4, 5, 6], &[3, 3, 3], 7)]).unwrap();
    let before = m.forward(&input, ForwardMode::Eval).unwrap().logits;
    input.decoder.langs.iter_mut().for_each(|l| *l = 1 - *l);
    input.encoder.langs.iter_mut().for_each(|l| *l = 1 - *l);
    let after = m.forward(&input, ForwardMode::Eval).unwrap().logits;
    assert!(max_abs_diff(&before, &after) > 0.0);
}

#[test]
fn decoder_is_not_causal() {
    let m = build_model(&tiny_config(), 5).unwrap();
    let mut input = ModelInput::from_sequences(&[seq(&[4, 5], &[3, 3, 3], 1)]).unwrap();
    let before = m.forward(&input, ForwardMode::Eval).unwrap().logits;
    input.decoder.ids[2] = 6;
    let after = m.forward(&input, ForwardMode::Eval).unwrap().logits;
    let pos0 = |t: &Tensor| t.get(0).unwrap().get(0).unwrap();
    assert!(max_abs_diff(&pos0(&before), &pos0(&after)) > 0.0);
}

#[test]
fn timestep_embedding_is_live() {
    let m = build_model(&tiny_config(), 5).unwrap();
    let a = m.forward(&ModelInput::from_sequences(&[seq(&[4], &[3], 1)]).unwrap(), ForwardMode::Eval).unwrap();
    let b = m.forward(&ModelInput::from_sequences(&[seq(&[4], &[3], 2)]).unwrap(), ForwardMode::Eval).unwrap();
    assert!(max_abs_diff(&a.logits, &b.logits) > 0.0);
    assert_eq!(max_abs_diff(&a.length_logits, &b.length_logits), 0.0);
}

#[test]
fn overflow_is_a_shape_error() {
    let m = build_model(&tiny_config(), 0).unwrap();
    let bad_t = ModelInput::from_sequences(&[seq(&[4], &[3], 3)]).unwrap();
    assert!(matches!(m.forward(&bad_t, ForwardMode::Eval), Err(Error::Shape(_))));
    let mut bad_pos = ModelInput::from_sequences(&[seq(&[4], &[3], 1)]).unwrap();
    bad_pos.decoder.positions[0] = 4;
    assert!(matches!(m.forward(&bad_pos, ForwardMode::Eval), Err(Error::Shape(_))));
    assert!(Segment::new(vec![1, 2], vec![0], vec![0, 1]).is_err());
    assert!(ModelInput::from_sequences(&[seq(&[], &[3], 1)]).is_err());
}

fn targets(dec: &[u32], on: &[bool], len: usize, w: f64) -> LossTargets {
    LossTargets {
        targets: vec![dec.to_vec()],
        loss_positions: vec![on.to_vec()],
        true_lengths: vec![len],
        length_weight: w,
    }
}

#[test]
fn zero_length_weight_gives_zero_length_head_gradient() {
    let m = build_model(&tiny_config(), 6).unwrap();
    let input = ModelInput::from_sequences(&[seq(&[4, 5], &[3, 3], 1)]).unwrap();
    let (_, g) = m
        .loss_and_gradients(&input, &targets(&[4, 5], &[true, true], 2, 0.0), ForwardMode::Eval)
        .unwrap();
    for name in ["length_head.weight", "length_head.bias"] {
        let norm = g.get(name).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(norm, 0.0, "{name}");
    }
    let (_, g) = m
        .loss_and_gradients(&input, &targets(&[4, 5], &[true, true], 2, 0.1), ForwardMode::Eval)
        .unwrap();
    let norm = g.get("length_head.bias").unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
    assert!(norm > 0.0);
}

#[test]
fn empty_loss_positions_leave_length_term() {
    let m = build_model(&tiny_config(), 6).unwrap();
    let input = ModelInput::from_sequences(&[seq(&[4, 5], &[3, 3], 1)]).unwrap();
    let v = m.loss(&input, &targets(&[4, 5], &[false, false], 2, 0.5), ForwardMode::Eval).unwrap();
    assert_eq!(v.token, 0.0);
    assert_eq!(v.n_loss_tokens, 0);
    assert!(v.length > 0.0);
    assert!((v.total - 0.5 * v.length).abs() < 1e-12);
    // The length value is reported even when its weight is zero.
    let w0 = m.loss(&input, &targets(&[4, 5], &[false, false], 2, 0.0), ForwardMode::Eval).unwrap();
    assert!((w0.length - v.length).abs() < 1e-6);
    assert_eq!(w0.total, 0.0);
}

#[test]
fn certain_correct_logits_give_zero_token_loss() {
    let m = build_model(&tiny_config(), 6).unwrap();
    let mut values: BTreeMap<String, Tensor> =
        m.params().iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
    let zeros_w = values["output.weight"].zeros_like().unwrap();
    let mut bias = vec![0f32; 7];
    bias[4] = 1e4;
    values.insert("output.weight".into(), zeros_w);
    values.insert("output.bias".into(), Tensor::new(bias, &Device::Cpu).unwrap());
    m.set_params(&values).unwrap();
    let input = ModelInput::from_sequences(&[seq(&[4, 5], &[3, 3], 1)]).unwrap();
    let v = m.loss(&input, &targets(&[4, 4], &[true, true], 2, 0.0), ForwardMode::Eval).unwrap();
    assert!(v.token.abs() < 1e-6, "{}", v.token);
}

/// Central differences over every parameter element at 64-bit precision. Relative
/// error is taken against `max(|analytic|, |numeric|, 1e-6)`.
#[test]
fn gradients_match_finite_differences() {
    let cfg = ModelConfig {
        max_len: 3,
        ..tiny_config()
    };
    let m = DenoiserModel::new(&cfg, 21, DType::F64).unwrap();
    let input = ModelInput::from_sequences(&[seq(&[4, 5, 6], &[3, 2, 3], 2), seq(&[5, 4], &[3, 5], 1)]).unwrap();
    let tg = LossTargets {
        targets: vec![vec![4, 5, 6], vec![5, 4]],
        loss_positions: vec![vec![true, false, true], vec![true, true]],
        true_lengths: vec![3, 2],
        length_weight: 0.3,
    };
    let (_, grads) = m.loss_and_gradients(&input, &tg, ForwardMode::Eval).unwrap();
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for (name, var) in m.params() {
        let original = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let analytic = grads.get(name).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..original.len() {
            let probe = |delta: f64| {
                let mut v = original.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
                m.loss(&input, &tg, ForwardMode::Eval).unwrap().total
            };
            // Fourth-order central stencil.
            let numeric = (8.0 * (probe(eps) - probe(-eps)) - (probe(2.0 * eps) - probe(-2.0 * eps))) / (12.0 * eps);
            let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic[i] - numeric).abs() / scale;
            worst = worst.max(rel);
        }
        var.set(&Tensor::from_vec(original, var.shape(), &Device::Cpu).unwrap()).unwrap();
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

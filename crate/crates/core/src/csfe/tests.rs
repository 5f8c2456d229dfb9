use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::gradcheck::check_registry;

fn small_cfg(blocks: usize, heads: usize) -> EncoderConfig {
    EncoderConfig { d_model: 8, blocks, heads, style_dim: 3, ff_width: 12, tokens: 3, modulate_values: true }
}

/// Registry with every trainable entry randomized so gradients are non-trivial.
fn randomized(cfg: &EncoderConfig, seed: u64) -> (ParamRegistry, Csfe) {
    let mut reg = ParamRegistry::new();
    let enc = Csfe::register(&mut reg, cfg, 5, 4, true, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for id in reg.trainable_ids() {
        let shape = reg.value(id).shape().to_vec();
        *reg.value_mut(id) = Tensor::randn(&shape, 0.7, &mut rng);
    }
    (reg, enc)
}

fn naive_matvec_rows(e: &Tensor, w: &Tensor) -> Vec<Vec<f64>> {
    let (n, ds, d) = (e.rows(), e.last_dim(), w.last_dim());
    (0..n)
        .map(|i| (0..d).map(|j| (0..ds).map(|p| e.data()[i * ds + p] * w.data()[p * d + j]).sum()).collect())
        .collect()
}

#[test]
fn zero_style_is_additive_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let q = g.constant(Tensor::randn(&[6, 8], 1.0, &mut rng));
    let k = g.constant(Tensor::randn(&[6, 8], 1.0, &mut rng));
    let v = g.constant(Tensor::randn(&[6, 8], 1.0, &mut rng));
    let e = g.constant(Tensor::zeros(&[2, 3]));
    let w = StyleAdapterWeights {
        w_q: g.constant(Tensor::randn(&[3, 8], 1.0, &mut rng)),
        w_k: g.constant(Tensor::randn(&[3, 8], 1.0, &mut rng)),
        w_v: g.constant(Tensor::randn(&[3, 8], 1.0, &mut rng)),
    };
    let (q2, k2, v2) = style_modulate_qkv(&mut g, q, k, v, e, &w, 3).unwrap();
    for (a, b) in [(q, q2), (k, k2), (v, v2)] {
        assert_eq!(g.value(a).data(), g.value(b).data());
    }
}

#[test]
fn identity_adapter_with_basis_style_shifts_every_row() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[4, 5]));
    let mut e1 = vec![0.0; 5];
    e1[0] = 1.0;
    let e = g.constant(Tensor::new(vec![1, 5], e1.clone()).unwrap());
    let eye = g.constant(Tensor::eye(5));
    let w = StyleAdapterWeights { w_q: eye, w_k: eye, w_v: eye };
    let (q2, _, _) = style_modulate_qkv(&mut g, z, z, z, e, &w, 4).unwrap();
    for r in 0..4 {
        assert_eq!(g.value(q2).row(r), e1.as_slice());
    }
}

#[test]
fn modulation_matches_matvec_broadcast_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (b, t, d, ds) = (3, 4, 6, 2);
    let qkv: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[b * t, d], 1.0, &mut rng)).collect();
    let e = Tensor::randn(&[b, ds], 1.0, &mut rng);
    let ws: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[ds, d], 1.0, &mut rng)).collect();
    let mut g = Graph::new();
    let v: Vec<Var> = qkv.iter().map(|x| g.constant(x.clone())).collect();
    let ev = g.constant(e.clone());
    let wv: Vec<Var> = ws.iter().map(|x| g.constant(x.clone())).collect();
    let w = StyleAdapterWeights { w_q: wv[0], w_k: wv[1], w_v: wv[2] };
    let (a, bb, c) = style_modulate_qkv(&mut g, v[0], v[1], v[2], ev, &w, t).unwrap();
    for (i, out) in [a, bb, c].into_iter().enumerate() {
        let offs = naive_matvec_rows(&e, &ws[i]);
        for row in 0..b * t {
            for j in 0..d {
                let expect = qkv[i].data()[row * d + j] + offs[row / t][j];
                assert!((g.value(out).data()[row * d + j] - expect).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn adapter_dimension_mismatch_is_shape_error() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::zeros(&[2, 4]));
    let e = g.constant(Tensor::zeros(&[1, 3]));
    let wq = g.constant(Tensor::zeros(&[2, 4]));
    let w = StyleAdapterWeights { w_q: wq, w_k: wq, w_v: wq };
    assert!(matches!(style_modulate_qkv(&mut g, q, q, q, e, &w, 2), Err(Error::Shape { .. })));
}

fn random_attention(g: &mut Graph, rng: &mut ChaCha8Rng, d: usize, ds: usize) -> AttentionWeights {
    let mut m = |r: usize, c: usize| g.constant(Tensor::randn(&[r, c], 0.5, rng));
    let (wq, wk, wv, wo) = (m(d, d), m(d, d), m(d, d), m(d, d));
    let style = Some(StyleAdapterWeights { w_q: m(ds, d), w_k: m(ds, d), w_v: m(ds, d) });
    AttentionWeights { wq, wk, wv, wo, style }
}

#[test]
fn single_token_attends_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let w = random_attention(&mut g, &mut rng, 4, 2);
    let f = g.constant(Tensor::randn(&[1, 4], 1.0, &mut rng));
    let e = g.constant(Tensor::randn(&[1, 2], 1.0, &mut rng));
    let out = style_attention(&mut g, f, Some(e), &w, 1, 1, 2, true).unwrap();
    assert!(g.value(out.weights).data().iter().all(|&x| x == 1.0));
    let proj = g.matmul(out.values, w.wo).unwrap();
    assert_eq!(g.value(proj).data(), g.value(out.output).data());
}

#[test]
fn identical_keys_give_uniform_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let mut w = random_attention(&mut g, &mut rng, 4, 2);
    // keys are f·0 + offset, identical for both tokens of the sequence
    w.wk = g.constant(Tensor::zeros(&[4, 4]));
    let f = g.constant(Tensor::randn(&[2, 4], 1.0, &mut rng));
    let e = g.constant(Tensor::randn(&[1, 2], 1.0, &mut rng));
    let out = style_attention(&mut g, f, Some(e), &w, 1, 2, 2, true).unwrap();
    for x in g.value(out.weights).data() {
        assert!((x - 0.5).abs() < 1e-15);
    }
    let v = g.value(out.values).clone();
    for j in 0..4 {
        let mean = 0.5 * (v.data()[j] + v.data()[4 + j]);
        for r in 0..2 {
            assert!((g.value(out.pre_projection).data()[r * 4 + j] - mean).abs() < 1e-14);
        }
    }
}

fn naive_attention(f: &Tensor, e: &Tensor, w: &[Tensor], batch: usize, t: usize, heads: usize, mv: bool) -> Vec<f64> {
    let d = f.last_dim();
    let dk = d / heads;
    let proj = |x: &Tensor, m: &Tensor| -> Vec<Vec<f64>> {
        (0..x.rows()).map(|i| (0..m.last_dim()).map(|j| (0..x.last_dim()).map(|p| x.row(i)[p] * m.data()[p * m.last_dim() + j]).sum()).collect()).collect()
    };
    let off = |m: &Tensor| naive_matvec_rows(e, m);
    let (oq, ok, ov) = (off(&w[4]), off(&w[5]), off(&w[6]));
    let mut q = proj(f, &w[0]);
    let mut k = proj(f, &w[1]);
    let mut v = proj(f, &w[2]);
    for r in 0..batch * t {
        for j in 0..d {
            q[r][j] += oq[r / t][j];
            k[r][j] += ok[r / t][j];
            if mv {
                v[r][j] += ov[r / t][j];
            }
        }
    }
    let mut cat = vec![vec![0.0; d]; batch * t];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..t {
                let s: Vec<f64> = (0..t)
                    .map(|j| (0..dk).map(|p| q[b * t + i][h * dk + p] * k[b * t + j][h * dk + p]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for j in 0..t {
                    let a = (s[j] - m).exp() / z;
                    for p in 0..dk {
                        cat[b * t + i][h * dk + p] += a * v[b * t + j][h * dk + p];
                    }
                }
            }
        }
    }
    let cat = Tensor::from_rows(&cat).unwrap();
    proj(&cat, &w[3]).concat()
}

#[test]
fn attention_matches_dense_reference() {
    for (seed, mv) in [(10u64, true), (11, false), (12, true)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (batch, t, d, heads, ds) = (2, 3, 6, 2, 2);
        let ws: Vec<Tensor> = [(d, d), (d, d), (d, d), (d, d), (ds, d), (ds, d), (ds, d)]
            .iter()
            .map(|&(r, c)| Tensor::randn(&[r, c], 0.6, &mut rng))
            .collect();
        let f = Tensor::randn(&[batch * t, d], 1.0, &mut rng);
        let e = Tensor::randn(&[batch, ds], 1.0, &mut rng);
        let mut g = Graph::new();
        let v: Vec<Var> = ws.iter().map(|x| g.constant(x.clone())).collect();
        let w = AttentionWeights {
            wq: v[0],
            wk: v[1],
            wv: v[2],
            wo: v[3],
            style: Some(StyleAdapterWeights { w_q: v[4], w_k: v[5], w_v: v[6] }),
        };
        let fv = g.constant(f.clone());
        let ev = g.constant(e.clone());
        let out = style_attention(&mut g, fv, Some(ev), &w, batch, t, heads, mv).unwrap();
        let reference = naive_attention(&f, &e, &ws, batch, t, heads, mv);
        for (a, b) in g.value(out.output).data().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn zero_tokens_is_shape_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let w = random_attention(&mut g, &mut rng, 4, 2);
    let f = g.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(style_attention(&mut g, f, None, &w, 1, 0, 2, true), Err(Error::Shape { .. })));
}

#[test]
fn encoding_is_deterministic_and_checks_style() {
    let (reg, enc) = randomized(&small_cfg(2, 2), 5);
    let x = [0.3, -1.0, 2.0, 0.1, 0.0];
    let a = encode_image(&enc, &reg, &x, 2).unwrap();
    let b = encode_image(&enc, &reg, &x, 2).unwrap();
    assert_eq!(a.len(), 8);
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(matches!(encode_image(&enc, &reg, &x, 4), Err(Error::Domain(_))));
}

#[test]
fn zero_style_table_reduces_to_vanilla_encoder() {
    let (mut reg, enc) = randomized(&small_cfg(2, 2), 6);
    let table = enc.style_table.unwrap();
    *reg.value_mut(table) = Tensor::zeros(reg.value(table).shape());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for style in 0..4 {
        let x = Tensor::randn(&[5], 1.0, &mut rng).into_data();
        assert_eq!(encode_image(&enc, &reg, &x, style).unwrap(), encode_vanilla(&enc, &reg, &x, style).unwrap());
    }
}

#[test]
fn one_block_encoder_matches_hand_composition() {
    let cfg = small_cfg(1, 1);
    let (reg, enc) = randomized(&cfg, 8);
    let x = vec![0.5, -0.2, 1.5, -1.1, 0.7];
    let got = encode_image(&enc, &reg, &x, 1).unwrap();

    let val = |id| reg.value(id).clone();
    let b = &enc.blocks[0];
    let a = b.style.unwrap();
    let mut g = Graph::new();
    let obs = g.constant(Tensor::new(vec![1, 5], x).unwrap());
    let bw = g.constant(val(enc.backbone_w));
    let bb = g.constant(val(enc.backbone_b));
    let h = g.matmul(obs, bw).unwrap();
    let h = g.add_row(h, bb).unwrap();
    let h = g.tanh(h).unwrap();
    let tok = g.reshape(h, vec![3, 8]).unwrap();
    let table = g.constant(val(enc.style_table.unwrap()));
    let e = g.gather_rows(table, vec![1]).unwrap();
    let n = g.layer_norm(tok, LN_EPS).unwrap();
    let (wq, wk, wv, wo) = (g.constant(val(b.wq)), g.constant(val(b.wk)), g.constant(val(b.wv)), g.constant(val(b.wo)));
    let q = g.matmul(n, wq).unwrap();
    let k = g.matmul(n, wk).unwrap();
    let v = g.matmul(n, wv).unwrap();
    let ad = StyleAdapterWeights { w_q: g.constant(val(a.w_q)), w_k: g.constant(val(a.w_k)), w_v: g.constant(val(a.w_v)) };
    let (q, k, v) = style_modulate_qkv(&mut g, q, k, v, e, &ad, 3).unwrap();
    let s = g.matmul_nt(q, k).unwrap();
    let s = g.scale(s, 1.0 / 8f64.sqrt()).unwrap();
    let p = g.softmax_lastdim(s).unwrap();
    let o = g.matmul(p, v).unwrap();
    let o = g.matmul(o, wo).unwrap();
    let x1 = g.add(tok, o).unwrap();
    let n2 = g.layer_norm(x1, LN_EPS).unwrap();
    let (f1, f1b, f2, f2b) = (g.constant(val(b.ff1)), g.constant(val(b.ff1_b)), g.constant(val(b.ff2)), g.constant(val(b.ff2_b)));
    let h = g.matmul(n2, f1).unwrap();
    let h = g.add_row(h, f1b).unwrap();
    let h = g.gelu(h).unwrap();
    let h = g.matmul(h, f2).unwrap();
    let h = g.add_row(h, f2b).unwrap();
    let x2 = g.add(x1, h).unwrap();
    let pooled = g.group_mean(x2, 3).unwrap();
    for (a, b) in got.iter().zip(g.value(pooled).data()) {
        assert!((a - b).abs() < 1e-13, "{a} vs {b}");
    }
}

#[test]
fn adapter_and_table_gradients_pass_finite_differences() {
    let cfg = small_cfg(2, 2);
    for seed in 0..20u64 {
        let (reg, enc) = randomized(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let obs = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let proj = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let ids = reg.trainable_ids();
        let report = check_registry(&reg, &ids, 1e-5, Some(6), seed, |s| {
            let o = s.graph.constant(obs.clone());
            let f = enc.encode(s, o, &[0, 3, 1], true)?;
            let p = s.graph.constant(proj.clone());
            let y = s.graph.mul(f, p)?;
            s.graph.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "seed {seed}: {} {}", report.max_rel_err, report.worst);
    }
}

#[test]
fn backbone_and_body_receive_no_gradient() {
    let (reg, enc) = randomized(&small_cfg(2, 2), 9);
    let mut s = Session::new(&reg, true);
    let o = s.graph.constant(Tensor::filled(&[2, 5], 0.3));
    let f = enc.encode(&mut s, o, &[0, 1], true).unwrap();
    let y = s.graph.sum(f).unwrap();
    s.graph.backward(y).unwrap();
    for id in reg.frozen_ids() {
        let v = s.bound(id).expect("every frozen entry is used");
        assert!(s.graph.grad(v).is_none(), "{} got a gradient", reg.get(id).name);
    }
    for id in reg.trainable_ids() {
        assert!(s.graph.grad(s.bound(id).unwrap()).is_some());
    }
}

#[test]
fn disabled_modulation_registers_no_style_parameters() {
    let mut reg = ParamRegistry::new();
    let enc = Csfe::register(&mut reg, &EncoderConfig::default(), 32, 5, false, 0).unwrap();
    assert_eq!(reg.trainable_count(), 0);
    assert_eq!(enc.trainable_count(), 0);
    let mut reg2 = ParamRegistry::new();
    let enc2 = Csfe::register(&mut reg2, &EncoderConfig::default(), 32, 5, true, 0).unwrap();
    assert_eq!(reg2.trainable_count(), enc2.trainable_count());
    assert_eq!(enc2.trainable_count(), 5 * 16 + 2 * 3 * 16 * 64);
    // frozen body is identical with or without the adapters
    assert_eq!(reg.frozen_checksum(), reg2.frozen_checksum());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn output_has_model_width(style in 0usize..4, x in prop::collection::vec(-3.0f64..3.0, 5)) {
        let (reg, enc) = randomized(&small_cfg(1, 2), 11);
        let f = encode_image(&enc, &reg, &x, style).unwrap();
        prop_assert_eq!(f.len(), 8);
        prop_assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_style_reduction_holds_for_all_inputs(style in 0usize..4, x in prop::collection::vec(-3.0f64..3.0, 5)) {
        let (mut reg, enc) = randomized(&small_cfg(2, 2), 12);
        let t = enc.style_table.unwrap();
        *reg.value_mut(t) = Tensor::zeros(&[4, 3]);
        prop_assert_eq!(encode_image(&enc, &reg, &x, style).unwrap(), encode_vanilla(&enc, &reg, &x, style).unwrap());
    }
}

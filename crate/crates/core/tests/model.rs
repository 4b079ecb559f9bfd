//! Model stages against dense 64-bit reference evaluations, shape contracts,
//! degenerate-parameter identities, and structural invariants.

use mft_core::model::{extractor, AuxTokenizer, HsiTokenizer, Mft, ModelConfig, SequenceAssembler, TokenizerKind};
use mft_core::nn::{Forward, Mode, NORM_EPS};
use mft_core::params::{Init, ParamKind, ParamSet};
use mft_core::{MftError, Rng, Tape, Tensor, Var};

fn toy(bands: usize, aux: usize, patch: usize, tokens: usize, dim: usize, heads: usize, kind: TokenizerKind) -> ModelConfig {
    ModelConfig {
        patch,
        tokens,
        embed_dim: dim,
        heads,
        mlp_hidden: 4 * dim,
        tokenizer: kind,
        ..ModelConfig::new(bands, aux, 3)
    }
}

fn set(ps: &mut ParamSet<f64>, name: &str, t: Tensor<f64>) {
    let id = ps.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    ps.set(id, t).unwrap();
}

fn zero(ps: &mut ParamSet<f64>, name: &str) {
    let id = ps.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let shape = ps.get(id).shape().to_vec();
    ps.set(id, Tensor::zeros(shape)).unwrap();
}

fn get(ps: &ParamSet<f64>, name: &str) -> Tensor<f64> {
    ps.get(ps.find(name).unwrap()).clone()
}

/// Mark every batch norm as trained so eval mode uses its stored statistics.
fn mark_trained(ps: &mut ParamSet<f64>) {
    let ids: Vec<_> = ps.ids().filter(|&id| ps.entry(id).name.ends_with(".tracked")).collect();
    for id in ids {
        ps.set(id, Tensor::ones([1])).unwrap();
    }
}

/// Random running statistics and affine terms for a batch norm.
fn randomize_bn(ps: &mut ParamSet<f64>, rng: &mut Rng, prefix: &str) {
    let c = get(ps, &format!("{prefix}.gamma")).len();
    set(ps, &format!("{prefix}.gamma"), rng.uniform_tensor([c], 0.5, 1.5));
    set(ps, &format!("{prefix}.beta"), rng.uniform_tensor([c], -0.5, 0.5));
    set(ps, &format!("{prefix}.running_mean"), rng.uniform_tensor([c], -0.5, 0.5));
    set(ps, &format!("{prefix}.running_var"), rng.uniform_tensor([c], 0.5, 2.0));
    set(ps, &format!("{prefix}.tracked"), Tensor::ones([1]));
}

fn erf(x: f64) -> f64 {
    let (mut term, mut sum) = (x, x);
    for n in 1..200 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Run `f` with a fresh tape and return the value of the node it yields.
fn eval<F>(ps: &ParamSet<f64>, mode: Mode, inputs: &[Tensor<f64>], f: F) -> Tensor<f64>
where
    F: FnOnce(&mut Forward<'_, '_, f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let xs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let mut fwd = Forward::new(&mut tape, ps, mode, Rng::new(99));
    let out = f(&mut fwd, &xs);
    tape.value(out).clone()
}

/// `[c_out, c_in/groups, kh, kw]` convolution of one `[c_in, h, w]` sample,
/// stride 1, zero padding `p`.
fn conv2d_ref(x: &[f64], c_in: usize, h: usize, w: usize, wt: &Tensor<f64>, bias: &[f64], groups: usize, p: usize) -> Vec<f64> {
    let s = wt.shape();
    let (c_out, cig, kh, kw) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h + 2 * p + 1 - kh, w + 2 * p + 1 - kw);
    let cog = c_out / groups;
    assert_eq!(cig * groups, c_in);
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        let g = o / cog;
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = bias[o];
                for ci in 0..cig {
                    let c = g * cig + ci;
                    for a in 0..kh {
                        for b in 0..kw {
                            let (y, xx) = ((i + a) as isize - p as isize, (j + b) as isize - p as isize);
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            acc += wt.at(&[o, ci, a, b]) * x[(c * h + y as usize) * w + xx as usize];
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    out
}

fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y}");
    }
}

// ── shapes ──────────────────────────────────────────────────────────────

#[test]
fn houston_configuration_produces_annotated_shapes() {
    let cfg = ModelConfig::new(144, 1, 15);
    let (model, ps) = Mft::new::<f32>(cfg.clone(), 3).unwrap();
    assert_eq!(ps.weight_count(), cfg.parameter_count());
    let mut rng = Rng::new(4);
    let mut tape = Tape::<f32>::new();
    let xh = tape.constant(rng.normal_tensor([2, 11, 11, 144], 1.0));
    let xl = tape.constant(rng.normal_tensor([2, 11, 11, 1], 1.0));
    let mut fwd = Forward::new(&mut tape, &ps, Mode::Train, Rng::new(5));
    let tr = model.trace(&mut fwd, xh, xl).unwrap();
    let attn = fwd.attention().to_vec();
    assert_eq!(tape.shape(tr.conv3d), &[2, 8, 11, 11, 136]);
    assert_eq!(tape.shape(tr.hetconv), &[2, 64, 11, 11]);
    assert_eq!(tape.shape(tr.patch_tokens), &[2, 4, 64]);
    assert_eq!(tape.shape(tr.cls), &[2, 1, 64]);
    assert_eq!(tape.shape(tr.sequence), &[2, 5, 64]);
    assert_eq!(tape.shape(tr.blocks[0]), &[2, 5, 64]);
    assert_eq!(tape.shape(tr.logits), &[2, 15]);
    assert_eq!(attn.len(), 1);
    assert_eq!(tape.shape(attn[0]), &[2, 8, 1, 5]);
}

#[test]
fn aux_cls_is_one_token_for_every_modality_and_variant() {
    for kind in [TokenizerKind::Pixel, TokenizerKind::Channel] {
        for c in [1, 4, 8] {
            let (model, ps) = Mft::new::<f64>(toy(9, c, 11, 4, 64, 8, kind), 1).unwrap();
            let x = Rng::new(c as u64).normal_tensor([2, c, 11, 11], 1.0);
            let out = eval(&ps, Mode::Train, &[x], |f, x| model.aux_tokenizer.forward(f, x[0]).unwrap());
            assert_eq!(out.shape(), &[2, 1, 64], "{kind} C={c}");
        }
    }
}

#[test]
fn fewer_than_nine_bands_is_a_configuration_error() {
    let err = Mft::new::<f32>(ModelConfig::new(8, 1, 3), 0).unwrap_err();
    assert!(matches!(err, MftError::Config(_)), "{err}");
}

#[test]
fn nine_bands_collapse_the_spectral_axis() {
    let (model, ps) = Mft::new::<f64>(toy(9, 1, 5, 2, 8, 2, TokenizerKind::Channel), 0).unwrap();
    let x = Rng::new(1).normal_tensor([2, 5, 5, 9], 1.0);
    let out = eval(&ps, Mode::Train, &[x], |f, x| model.extractor.conv3d_block(f, x[0]).unwrap());
    assert_eq!(out.shape(), &[2, 8, 5, 5, 1]);
}

#[test]
fn invalid_configurations_are_rejected() {
    let base = ModelConfig::new(16, 1, 4);
    for bad in [
        ModelConfig { patch: 4, ..base.clone() },
        ModelConfig { heads: 5, ..base.clone() },
        ModelConfig { tokens: 0, ..base.clone() },
        ModelConfig { classes: 1, ..base.clone() },
        ModelConfig { dropout: 1.0, ..base.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(MftError::Config(_))), "{bad:?}");
    }
    base.validate().unwrap();
}

#[test]
fn mismatched_inputs_are_configuration_errors() {
    let (model, ps) = Mft::new::<f64>(toy(12, 2, 5, 2, 8, 2, TokenizerKind::Channel), 0).unwrap();
    let xh = Tensor::zeros([1, 5, 5, 12]);
    let xl = Tensor::zeros([1, 5, 5, 3]);
    let mut tape = Tape::new();
    let (h, l) = (tape.constant(xh), tape.constant(xl));
    let mut fwd = Forward::new(&mut tape, &ps, Mode::Eval, Rng::new(0));
    assert!(matches!(model.forward(&mut fwd, h, l), Err(MftError::Config(_))));
}

// ── feature extractor ───────────────────────────────────────────────────

#[test]
fn zero_conv3d_weights_propagate_zeros() {
    let (model, mut ps) = Mft::new::<f64>(toy(12, 1, 5, 2, 8, 2, TokenizerKind::Channel), 0).unwrap();
    zero(&mut ps, "extractor.conv3d.weight");
    zero(&mut ps, "extractor.conv3d.bias");
    mark_trained(&mut ps);
    let x = Rng::new(2).normal_tensor([2, 5, 5, 12], 1.0);
    let out = eval(&ps, Mode::Eval, &[x], |f, x| model.extractor.conv3d_block(f, x[0]).unwrap());
    assert_eq!(out.shape(), &[2, 8, 5, 5, 4]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

/// `[N, 8, k, k, D]` → flat channels `c·D + d`.
fn flatten_channels(x: &Tensor<f64>, sample: usize) -> Vec<f64> {
    let s = x.shape();
    let (c8, h, w, d) = (s[1], s[2], s[3], s[4]);
    let mut out = vec![0.0; c8 * d * h * w];
    for c in 0..c8 {
        for dd in 0..d {
            for i in 0..h {
                for j in 0..w {
                    out[((c * d + dd) * h + i) * w + j] = x.at(&[sample, c, i, j, dd]);
                }
            }
        }
    }
    out
}

#[test]
fn hetconv_merge_equals_sum_of_independent_branches() {
    let (model, mut ps) = Mft::new::<f64>(toy(12, 1, 5, 2, 64, 8, TokenizerKind::Channel), 7).unwrap();
    let mut rng = Rng::new(8);
    set(&mut ps, "extractor.het_group.bias", rng.normal_tensor([64], 0.3));
    set(&mut ps, "extractor.het_point.bias", rng.normal_tensor([64], 0.3));
    let x = rng.normal_tensor::<f64>([2, 8, 5, 5, 4], 1.0);
    let merged = eval(&ps, Mode::Train, &[x.clone()], |f, v| model.extractor.hetconv2d_merged(f, v[0]).unwrap());
    assert_eq!(merged.shape(), &[2, 64, 5, 5]);
    for n in 0..2 {
        let flat = flatten_channels(&x, n);
        let g = conv2d_ref(
            &flat, 32, 5, 5,
            &get(&ps, "extractor.het_group.weight"),
            get(&ps, "extractor.het_group.bias").data(),
            4, 1,
        );
        let p = conv2d_ref(
            &flat, 32, 5, 5,
            &get(&ps, "extractor.het_point.weight"),
            get(&ps, "extractor.het_point.bias").data(),
            1, 0,
        );
        let expect: Vec<f64> = g.iter().zip(&p).map(|(a, b)| a + b).collect();
        assert_close(&merged.data()[n * 1600..(n + 1) * 1600], &expect, 1e-12, "merged");
    }

    // scaling both branches (weights and biases) scales the merged output
    let alpha = 2.5;
    for name in ["extractor.het_group.weight", "extractor.het_group.bias", "extractor.het_point.weight", "extractor.het_point.bias"] {
        let t = get(&ps, name);
        set(&mut ps, name, Tensor::from_fn(t.shape().to_vec(), |i| alpha * t.data()[i]));
    }
    let scaled = eval(&ps, Mode::Train, &[x], |f, v| model.extractor.hetconv2d_merged(f, v[0]).unwrap());
    let expect: Vec<f64> = merged.data().iter().map(|v| alpha * v).collect();
    assert_close(scaled.data(), &expect, 1e-12, "scaled");
}

#[test]
fn grouped_branch_alone_mixes_only_within_its_group() {
    let (model, mut ps) = Mft::new::<f64>(toy(12, 1, 5, 2, 64, 8, TokenizerKind::Channel), 7).unwrap();
    zero(&mut ps, "extractor.het_point.weight");
    // 32 input channels, 4 groups of 8; 16 outputs per group.
    // Output o copies input channel g·8 + (o mod 8) at the kernel center.
    set(
        &mut ps,
        "extractor.het_group.weight",
        Tensor::from_fn([64, 8, 3, 3], |i| {
            let (o, rest) = (i / 72, i % 72);
            let (ci, tap) = (rest / 9, rest % 9);
            if tap == 4 && ci == o % 8 { 1.0 } else { 0.0 }
        }),
    );
    mark_trained(&mut ps);
    let x = Rng::new(9).uniform_tensor::<f64>([1, 8, 5, 5, 4], 0.0, 1.0);
    let out = eval(&ps, Mode::Eval, &[x.clone()], |f, v| model.extractor.hetconv2d_block(f, v[0]).unwrap());
    let flat = flatten_channels(&x, 0);
    let scale = 1.0 / (1.0 + NORM_EPS).sqrt();
    for o in 0..64 {
        let src = (o / 16) * 8 + o % 8;
        for s in 0..25 {
            let want = flat[src * 25 + s] * scale;
            assert!((out.data()[o * 25 + s] - want).abs() < 1e-12, "o={o} s={s}");
        }
    }
}

// ── tokenizers ──────────────────────────────────────────────────────────

/// Direct evaluation of the soft tokenizer on one sample; `x[s][c]`.
fn tokenize_ref(x: &[Vec<f64>], wa: &Tensor<f64>, wb: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (c, n) = (wa.shape()[0], wa.shape()[1]);
    let d = wb.shape()[1];
    let s = x.len();
    let proj: Vec<Vec<f64>> = (0..s)
        .map(|p| (0..d).map(|j| (0..c).map(|q| x[p][q] * wb.at(&[q, j])).sum()).collect())
        .collect();
    (0..n)
        .map(|t| {
            let logits: Vec<f64> = (0..s).map(|p| (0..c).map(|q| x[p][q] * wa.at(&[q, t])).sum()).collect();
            let a = softmax(&logits);
            (0..d).map(|j| (0..s).map(|p| a[p] * proj[p][j]).sum()).collect()
        })
        .collect()
}

#[test]
fn hsi_tokenize_matches_dense_reference() {
    let (s_side, dim, n) = (2, 3, 2);
    for trial in 0..50u64 {
        let mut rng = Rng::new(1000 + trial);
        let mut ps = ParamSet::<f64>::new();
        let tok = HsiTokenizer::new(&mut ps, &mut Init { rng: &mut rng }, dim, n);
        let feat = rng.normal_tensor::<f64>([2, dim, s_side, s_side], 1.0);
        let out = eval(&ps, Mode::Train, &[feat.clone()], |f, v| tok.forward(f, v[0]).unwrap());
        assert_eq!(out.shape(), &[2, n, dim]);
        for b in 0..2 {
            let x: Vec<Vec<f64>> = (0..4)
                .map(|p| (0..dim).map(|c| feat.at(&[b, c, p / 2, p % 2])).collect())
                .collect();
            let want: Vec<f64> = tokenize_ref(&x, ps.get(tok.w_a), ps.get(tok.w_b)).concat();
            assert_close(&out.data()[b * n * dim..(b + 1) * n * dim], &want, 1e-6, "hsi tokens");
        }
    }
}

#[test]
fn zero_selection_weights_average_the_projected_rows() {
    let mut rng = Rng::new(3);
    let mut ps = ParamSet::<f64>::new();
    let tok = HsiTokenizer::new(&mut ps, &mut Init { rng: &mut rng }, 4, 3);
    ps.set(tok.w_a, Tensor::zeros([4, 3])).unwrap();
    let feat = rng.normal_tensor::<f64>([1, 4, 3, 3], 1.0);
    let out = eval(&ps, Mode::Eval, &[feat.clone()], |f, v| tok.forward(f, v[0]).unwrap());
    let wb = ps.get(tok.w_b);
    for j in 0..4 {
        let mean: f64 = (0..9)
            .map(|p| (0..4).map(|c| feat.at(&[0, c, p / 3, p % 3]) * wb.at(&[c, j])).sum::<f64>())
            .sum::<f64>()
            / 9.0;
        for t in 0..3 {
            assert!((out.at(&[0, t, j]) - mean).abs() < 1e-12);
        }
    }
}

/// Conv → eval batch norm → GELU → soft tokenizer, directly in 64-bit.
fn aux_ref(ps: &ParamSet<f64>, tok: &AuxTokenizer, x: &Tensor<f64>, b: usize) -> Vec<f64> {
    let s = x.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let sample = &x.data()[b * c * h * w..(b + 1) * c * h * w];
    let conv = conv2d_ref(sample, c, h, w, ps.get(tok.conv_weight), ps.get(tok.conv_bias).data(), 1, 1);
    let cc = ps.get(tok.conv_bias).len();
    let (g, be) = (ps.get(tok.bn.gamma).data(), ps.get(tok.bn.beta).data());
    let (rm, rv) = (ps.get(tok.bn.running_mean).data(), ps.get(tok.bn.running_var).data());
    let rows: Vec<Vec<f64>> = (0..h * w)
        .map(|p| {
            (0..cc)
                .map(|o| gelu((conv[o * h * w + p] - rm[o]) / (rv[o] + NORM_EPS).sqrt() * g[o] + be[o]))
                .collect()
        })
        .collect();
    tokenize_ref(&rows, ps.get(tok.w_a), ps.get(tok.w_b)).concat()
}

#[test]
fn aux_tokenize_matches_dense_reference_for_both_variants() {
    let (c, dim) = (2, 4);
    for kind in [TokenizerKind::Pixel, TokenizerKind::Channel] {
        for trial in 0..50u64 {
            let mut rng = Rng::new(2000 + trial);
            let mut ps = ParamSet::<f64>::new();
            let tok = AuxTokenizer::new(&mut ps, &mut Init { rng: &mut rng }, kind, c, dim);
            randomize_bn(&mut ps, &mut rng, "aux_tokenizer.bn");
            let bias_len = ps.get(tok.conv_bias).len();
            ps.set(tok.conv_bias, rng.normal_tensor([bias_len], 0.3)).unwrap();
            let x = rng.normal_tensor::<f64>([2, c, 2, 2], 1.0);
            let out = eval(&ps, Mode::Eval, &[x.clone()], |f, v| tok.forward(f, v[0]).unwrap());
            assert_eq!(out.shape(), &[2, 1, dim]);
            for b in 0..2 {
                let want = aux_ref(&ps, &tok, &x, b);
                assert_close(&out.data()[b * dim..(b + 1) * dim], &want, 1e-6, "cls");
            }
        }
    }
}

#[test]
fn pixel_tokenizer_with_zero_selection_takes_the_mean() {
    let mut rng = Rng::new(5);
    let mut ps = ParamSet::<f64>::new();
    let tok = AuxTokenizer::new(&mut ps, &mut Init { rng: &mut rng }, TokenizerKind::Pixel, 1, 4);
    assert_eq!(ps.get(tok.w_a).shape(), &[1, 1]);
    assert_eq!(ps.get(tok.w_b).shape(), &[1, 4]);
    ps.set(tok.w_a, Tensor::zeros([1, 1])).unwrap();
    mark_trained(&mut ps);
    let x = rng.normal_tensor::<f64>([1, 1, 3, 3], 1.0);
    let out = eval(&ps, Mode::Eval, &[x.clone()], |f, v| tok.forward(f, v[0]).unwrap());
    let want = tokenize_ref(
        &aux_rows(&ps, &tok, &x),
        &Tensor::zeros([1, 1]),
        ps.get(tok.w_b),
    );
    // uniform selection: the column mean of the projected rows
    let rows = aux_rows(&ps, &tok, &x);
    let wb = ps.get(tok.w_b);
    for j in 0..4 {
        let mean = rows.iter().map(|r| r[0] * wb.at(&[0, j])).sum::<f64>() / 9.0;
        assert!((out.at(&[0, 0, j]) - mean).abs() < 1e-12);
        assert!((want[0][j] - mean).abs() < 1e-12);
    }
}

fn aux_rows(ps: &ParamSet<f64>, tok: &AuxTokenizer, x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let s = x.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let conv = conv2d_ref(&x.data()[..c * h * w], c, h, w, ps.get(tok.conv_weight), ps.get(tok.conv_bias).data(), 1, 1);
    let inv = 1.0 / (1.0 + NORM_EPS).sqrt();
    (0..h * w).map(|p| vec![gelu(conv[p] * inv)]).collect()
}

#[test]
fn tokenizer_variant_must_match_its_parameters() {
    let (pixel, _) = Mft::new::<f32>(toy(12, 2, 5, 2, 8, 2, TokenizerKind::Pixel), 0).unwrap();
    let (_, channel_ps) = Mft::new::<f32>(toy(12, 2, 5, 2, 8, 2, TokenizerKind::Channel), 0).unwrap();
    let err = pixel.check_params(&channel_ps).unwrap_err();
    assert!(matches!(err, MftError::Config(_)), "{err}");
    assert!(err.to_string().contains("pixel"), "{err}");

    let mut ps = ParamSet::<f64>::new();
    let tok = AuxTokenizer::new(&mut ps, &mut Init { rng: &mut Rng::new(0) }, TokenizerKind::Pixel, 1, 4);
    ps.set(tok.w_a, Tensor::zeros([1, 1])).unwrap();
    let wrong = Tensor::zeros([1, 2, 3, 3]);
    let mut tape = Tape::new();
    let x = tape.constant(wrong);
    let mut fwd = Forward::new(&mut tape, &ps, Mode::Train, Rng::new(0));
    assert!(matches!(tok.forward(&mut fwd, x), Err(MftError::Config(_))));
}

#[test]
fn zero_position_embedding_in_eval_is_plain_concatenation() {
    let mut rng = Rng::new(6);
    let mut ps = ParamSet::<f64>::new();
    let seq = SequenceAssembler::new(&mut ps, &mut Init { rng: &mut rng }, 4, 8, 0.1);
    ps.set(seq.pos_embed, Tensor::zeros([5, 8])).unwrap();
    let cls = rng.normal_tensor::<f64>([2, 1, 8], 1.0);
    let patches = rng.normal_tensor::<f64>([2, 4, 8], 1.0);
    let out = eval(&ps, Mode::Eval, &[cls.clone(), patches.clone()], |f, v| seq.forward(f, v[0], v[1]).unwrap());
    assert_eq!(out.shape(), &[2, 5, 8]);
    for b in 0..2 {
        for j in 0..8 {
            assert_eq!(out.at(&[b, 0, j]), cls.at(&[b, 0, j]));
            for t in 0..4 {
                assert_eq!(out.at(&[b, t + 1, j]), patches.at(&[b, t, j]));
            }
        }
    }
}

#[test]
fn sequence_dropout_rate_and_eval_identity() {
    let mut rng = Rng::new(7);
    let mut ps = ParamSet::<f64>::new();
    let seq = SequenceAssembler::new(&mut ps, &mut Init { rng: &mut rng }, 4, 40, 0.1);
    // 50 samples × 5 tokens × 40 = 10⁴ elements
    let cls = rng.uniform_tensor::<f64>([50, 1, 40], 1.0, 2.0);
    let patches = rng.uniform_tensor::<f64>([50, 4, 40], 1.0, 2.0);
    let inputs = [cls, patches];
    let train = eval(&ps, Mode::Train, &inputs, |f, v| seq.forward(f, v[0], v[1]).unwrap());
    let zeros = train.data().iter().filter(|&&v| v == 0.0).count() as f64 / train.len() as f64;
    assert!((0.08..=0.12).contains(&zeros), "{zeros}");

    let pe = ps.get(seq.pos_embed).clone();
    let evald = eval(&ps, Mode::Eval, &inputs, |f, v| seq.forward(f, v[0], v[1]).unwrap());
    for b in 0..50 {
        for t in 0..5 {
            for j in 0..40 {
                let x = if t == 0 { inputs[0].at(&[b, 0, j]) } else { inputs[1].at(&[b, t - 1, j]) };
                assert_eq!(evald.at(&[b, t, j]), x + pe.at(&[t, j]));
            }
        }
    }
}

// ── encoder ─────────────────────────────────────────────────────────────

/// Cross attention of row 0 over all rows, one sample.
fn mcrosspa_ref(seq: &[Vec<f64>], wq: &Tensor<f64>, wk: &Tensor<f64>, wv: &Tensor<f64>, wl: &Tensor<f64>, heads: usize) -> Vec<f64> {
    let d = wq.shape()[0];
    let hd = d / heads;
    let lin = |x: &[f64], w: &Tensor<f64>| -> Vec<f64> { (0..d).map(|j| (0..d).map(|i| x[i] * w.at(&[i, j])).sum()).collect() };
    let q = lin(&seq[0], wq);
    let k: Vec<Vec<f64>> = seq.iter().map(|r| lin(r, wk)).collect();
    let v: Vec<Vec<f64>> = seq.iter().map(|r| lin(r, wv)).collect();
    let mut concat = vec![0.0; d];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let scores: Vec<f64> = k
            .iter()
            .map(|kr| cols.clone().map(|j| q[j] * kr[j]).sum::<f64>() / (hd as f64).sqrt())
            .collect();
        let z = softmax(&scores);
        for j in cols {
            concat[j] = z.iter().zip(&v).map(|(a, vr)| a * vr[j]).sum();
        }
    }
    lin(&concat, wl)
}

#[test]
fn mcrosspa_matches_dense_reference() {
    let (dim, heads, t) = (4, 2, 3);
    for trial in 0..20u64 {
        let (model, ps) = Mft::new::<f64>(toy(9, 1, 3, t - 1, dim, heads, TokenizerKind::Channel), trial).unwrap();
        let block = &model.blocks[0];
        let x = Rng::new(300 + trial).normal_tensor::<f64>([2, t, dim], 1.0);
        let out = eval(&ps, Mode::Eval, &[x.clone()], |f, v| block.mcrosspa(f, v[0]).unwrap());
        assert_eq!(out.shape(), &[2, 1, dim]);
        let w = |id| ps.get(id);
        for b in 0..2 {
            let rows: Vec<Vec<f64>> = (0..t).map(|r| (0..dim).map(|j| x.at(&[b, r, j])).collect()).collect();
            let want = mcrosspa_ref(&rows, w(block.w_q.weight), w(block.w_k.weight), w(block.w_v.weight), w(block.w_l.weight), heads);
            assert_close(&out.data()[b * dim..(b + 1) * dim], &want, 1e-6, "mcrosspa");
        }
    }
}

#[test]
fn identical_keys_give_uniform_attention() {
    let (model, mut ps) = Mft::new::<f64>(toy(9, 1, 3, 4, 16, 4, TokenizerKind::Channel), 1).unwrap();
    zero(&mut ps, "encoder.0.attn.w_k.weight");
    let block = model.blocks[0].clone();
    let x = Rng::new(2).normal_tensor::<f64>([1, 5, 16], 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut fwd = Forward::new(&mut tape, &ps, Mode::Eval, Rng::new(0));
    let out = block.mcrosspa(&mut fwd, xv).unwrap();
    let z = fwd.attention()[0];
    assert!(tape.value(z).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    let (wv, wl) = (get(&ps, "encoder.0.attn.w_v.weight"), get(&ps, "encoder.0.attn.w_l.weight"));
    let mean_v: Vec<f64> = (0..16)
        .map(|j| (0..5).map(|r| (0..16).map(|i| x.at(&[0, r, i]) * wv.at(&[i, j])).sum::<f64>()).sum::<f64>() / 5.0)
        .collect();
    let want: Vec<f64> = (0..16).map(|j| (0..16).map(|i| mean_v[i] * wl.at(&[i, j])).sum()).collect();
    assert_close(tape.value(out).data(), &want, 1e-12, "uniform attention");
}

#[test]
fn attention_weights_are_probability_vectors() {
    let (model, ps) = Mft::new::<f64>(toy(12, 2, 5, 4, 16, 4, TokenizerKind::Channel), 3).unwrap();
    let mut rng = Rng::new(4);
    for _ in 0..10 {
        let xh = rng.normal_tensor::<f64>([3, 5, 5, 12], 2.0);
        let xl = rng.normal_tensor::<f64>([3, 5, 5, 2], 2.0);
        let mut tape = Tape::new();
        let (h, l) = (tape.constant(xh), tape.constant(xl));
        let mut fwd = Forward::new(&mut tape, &ps, Mode::Train, rng.substream("dropout", &[]));
        model.forward(&mut fwd, h, l).unwrap();
        let z = fwd.attention()[0];
        let z = tape.value(z);
        assert_eq!(z.shape(), &[3, 4, 1, 5]);
        for row in z.data().chunks(5) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn encoder_block_with_zero_weights_is_the_identity() {
    let (model, mut ps) = Mft::new::<f64>(toy(9, 1, 3, 4, 16, 4, TokenizerKind::Channel), 1).unwrap();
    let names: Vec<String> = ps
        .entries()
        .iter()
        .filter(|e| e.name.starts_with("encoder.0.") && e.kind == ParamKind::Weight && !e.name.contains(".ln"))
        .map(|e| e.name.clone())
        .collect();
    assert_eq!(names.len(), 8);
    for n in &names {
        zero(&mut ps, n);
    }
    let x = Rng::new(2).normal_tensor::<f64>([2, 5, 16], 1.0);
    for mode in [Mode::Eval, Mode::Train] {
        let out = eval(&ps, mode, &[x.clone()], |f, v| model.blocks[0].forward(f, v[0]).unwrap());
        assert_eq!(out.data(), x.data(), "{mode:?}");
    }
}

#[test]
fn constant_head_and_row_zero_dependence() {
    let (model, mut ps) = Mft::new::<f64>(toy(9, 1, 3, 4, 16, 4, TokenizerKind::Channel), 1).unwrap();
    let mut rng = Rng::new(3);
    let x = rng.normal_tensor::<f64>([2, 5, 16], 1.0);
    let logits = eval(&ps, Mode::Eval, &[x.clone()], |f, v| model.classifier.forward(f, v[0]).unwrap());
    assert_eq!(logits.shape(), &[2, 3]);

    // rows 1.. do not matter
    let mut y = x.clone();
    for b in 0..2 {
        for idx in (b * 80 + 16)..(b + 1) * 80 {
            y.data_mut()[idx] += rng.normal(0.0, 5.0);
        }
    }
    let again = eval(&ps, Mode::Eval, &[y], |f, v| model.classifier.forward(f, v[0]).unwrap());
    assert_eq!(logits.data(), again.data());

    // adding a constant never changes the prediction
    let argmax = |r: &[f64]| (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap();
    for row in logits.data().chunks(3) {
        let shifted: Vec<f64> = row.iter().map(|v| v + 123.0).collect();
        assert_eq!(argmax(row), argmax(&shifted));
    }

    zero(&mut ps, "classifier.head.weight");
    set(&mut ps, "classifier.head.bias", Tensor::from_f64([3], &[0.5, -1.0, 2.0]).unwrap());
    let constant = eval(&ps, Mode::Eval, &[x], |f, v| model.classifier.forward(f, v[0]).unwrap());
    assert_eq!(constant.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
}

// ── whole model ─────────────────────────────────────────────────────────

#[test]
fn eval_forward_is_bit_identical_across_runs() {
    let cfg = toy(12, 2, 5, 2, 16, 4, TokenizerKind::Channel);
    let run = || {
        let (model, ps) = Mft::new::<f32>(cfg.clone(), 11).unwrap();
        let mut rng = Rng::new(12);
        let mut tape = Tape::<f32>::new();
        let h = tape.constant(rng.normal_tensor([4, 5, 5, 12], 1.0));
        let l = tape.constant(rng.normal_tensor([4, 5, 5, 2], 1.0));
        let mut fwd = Forward::new(&mut tape, &ps, Mode::Eval, Rng::new(0));
        let out = model.forward(&mut fwd, h, l).unwrap();
        tape.value(out).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn parameter_count_matches_hand_derivation() {
    // extractor: conv3d 648+8, bn 16, grouped 64·8·9+64, pointwise 64·32+64, bn 128 = 7584
    // hsi tokenizer: 64·2 + 64·64 = 4224
    // channel aux: 64·2·9+64, bn 128, 64, 64·64 = 5504; pixel: 18+1, 2, 1, 64 = 86
    // position: 3·64 = 192
    // block: 2·128 + 4·4096 + 64·256+256 + 256·64+64 = 49728
    // classifier: 128 + 64·3+3 = 323
    let mut cfg = ModelConfig { patch: 5, tokens: 2, ..ModelConfig::new(12, 2, 3) };
    for (kind, want) in [(TokenizerKind::Channel, 67_555), (TokenizerKind::Pixel, 62_137)] {
        cfg.tokenizer = kind;
        assert_eq!(cfg.parameter_count(), want, "{kind}");
        let (_, ps) = Mft::new::<f32>(cfg.clone(), 0).unwrap();
        assert_eq!(ps.weight_count(), want, "{kind}");
    }
    cfg.depth = 3;
    let (_, ps) = Mft::new::<f32>(cfg.clone(), 0).unwrap();
    assert_eq!(ps.weight_count(), cfg.parameter_count());
    assert_eq!(cfg.parameter_count(), 62_137 + 2 * 49_728);
}

#[test]
fn extractor_stage_constants() {
    assert_eq!(extractor::CONV3D_KERNEL, [3, 3, 9]);
    assert_eq!(extractor::HET_GROUPS, 4);
}

mod props {
    use super::*;
    use mft_core::model::soft_tokenize;
    use mft_core::Rng;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn token_mixing_is_convex_and_order_free(seed in any::<u64>(), s in 2usize..10, c in 1usize..5, n in 1usize..4) {
            let mut rng = Rng::new(seed);
            let x = rng.normal_tensor::<f64>([1, s, c], 2.0);
            let wa = rng.normal_tensor::<f64>([c, n], 1.0);
            let wb = rng.normal_tensor::<f64>([c, 3], 1.0);
            let mut perm: Vec<usize> = (0..s).collect();
            rng.shuffle(&mut perm);
            let xp = Tensor::from_fn([1, s, c], |i| x.data()[perm[i / c] * c + i % c]);

            let mut tape = Tape::new();
            let (a, b) = (tape.constant(wa), tape.constant(wb));
            let xv = tape.constant(x);
            let (att, tok) = soft_tokenize(&mut tape, xv, a, b).unwrap();
            let xpv = tape.constant(xp);
            let (_, tok_p) = soft_tokenize(&mut tape, xpv, a, b).unwrap();
            for row in tape.value(att).data().chunks(s) {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            let d = tape.value(tok).max_abs_diff(tape.value(tok_p));
            prop_assert!(d < 1e-12, "{}", d);
        }

        #[test]
        fn encoder_preserves_shape(seed in any::<u64>(), n in 1usize..5, heads in prop::sample::select(vec![1usize, 2, 4])) {
            let (model, ps) = Mft::new::<f64>(toy(9, 1, 3, n, 8, heads, TokenizerKind::Channel), seed).unwrap();
            let x = Rng::new(seed ^ 1).normal_tensor::<f64>([2, n + 1, 8], 1.0);
            let out = eval(&ps, Mode::Train, &[x], |f, v| model.blocks[0].forward(f, v[0]).unwrap());
            prop_assert_eq!(out.shape(), &[2, n + 1, 8]);
        }
    }
}

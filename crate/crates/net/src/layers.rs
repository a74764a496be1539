//! Layer zoo: spatial embedding trunk, generation heads, scaled dense /
//! recurrent / convolutional layers, and exact parameter accounting.
//!
//! The scheme throughout: a *spatial* side network embeds an object's static
//! attributes into a small hidden vector, and per-target generation heads map
//! that vector to pieces of the *temporal* network's parameters — scaling
//! vectors and biases in the diagonal variants, whole weight matrices in the
//! general variant. Gradients flow through the generated parameters back into
//! the trunk and heads, so the spatial side is trained by the forecasting
//! loss alone.
//!
//! Row convention: batched vectors are rank-2 `[B, n]` with one sample per
//! row, so `y = x·W` here computes the column-vector form `Wᵀx` per sample.

use crate::error::NetError;
use crate::{Result, Tape, Var};
use hyperst_tensor::Padding;

/// One affine stage: weight `[in, out]`, bias `[out]`.
#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

/// A generation head: one linear map from the embedding to one target tensor
/// (flattened). Independent per target.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w: Var,
    pub b: Var,
}

/// Embeds spatial attributes `[B, D_s]` into hidden vectors `[B, d]` with an
/// MLP: tanh between stages, final stage linear.
pub fn spatial_embed(tape: &mut Tape, s: Var, trunk: &[DenseVars]) -> Result<Var> {
    let mut x = s;
    for (i, stage) in trunk.iter().enumerate() {
        let a = tape.matmul(x, stage.w)?;
        x = tape.add_row_vec(a, stage.b)?;
        if i + 1 < trunk.len() {
            x = tape.tanh(x)?;
        }
    }
    Ok(x)
}

/// Applies one generation head to hidden vectors `[B, d]`, giving one
/// flattened target row per sample: `[B, target_size]`.
pub fn generate(tape: &mut Tape, hidden: Var, head: &HeadVars) -> Result<Var> {
    let a = tape.matmul(hidden, head.w)?;
    Ok(tape.add_row_vec(a, head.b)?)
}

/// General form for a dense target: the head emits the whole weight matrix
/// `θ [N_in, N_out]` for this one sample, and the layer applies it.
/// Per-sample because every object owns a different generated matrix.
pub fn general_hyperst_forward(
    tape: &mut Tape,
    x: Var,
    hidden: Var,
    head: &HeadVars,
    n_in: usize,
    n_out: usize,
) -> Result<Var> {
    let flat = generate(tape, hidden, head)?;
    let got = tape.value(flat).shape().to_vec();
    if got != [1, n_in * n_out] {
        return Err(NetError::Shape {
            symbol: "generated θ".into(),
            expected: vec![1, n_in * n_out],
            got,
        });
    }
    let theta = tape.reshape(flat, &[n_in, n_out])?;
    Ok(tape.matmul(x, theta)?)
}

/// Dense layer with a generated row-scaling vector: `y = (z ∘ x)·W′ (+ b)`,
/// algebraically `(diag(z)·W′)ᵀx + b` without materializing the diagonal.
/// `z` and `b` carry one row per sample (each object's own scales/bias).
pub fn hyperst_dense_forward(
    tape: &mut Tape,
    x: Var,
    z: Var,
    w: Var,
    b: Option<Var>,
) -> Result<Var> {
    let scaled = tape.mul(x, z)?;
    let y = tape.matmul(scaled, w)?;
    match b {
        Some(b) => Ok(tape.add(y, b)?),
        None => Ok(y),
    }
}

/// Bias of one recurrent gate: shared across the batch (learned `[H]`) or
/// per-row (generated `[B, H]`).
#[derive(Debug, Clone, Copy)]
pub enum GateBias {
    Shared(Var),
    PerRow(Var),
}

/// One gate of a recurrent step. `zx`/`zh` are optional generated scaling
/// rows for the input and hidden paths; `None` means unscaled (the plain
/// cell, or the general variant where `w`/`u` themselves are generated).
#[derive(Debug, Clone, Copy)]
pub struct LstmGate {
    pub w: Var,
    pub u: Var,
    pub zx: Option<Var>,
    pub zh: Option<Var>,
    pub bias: GateBias,
}

/// The four gates of one step, in equation order.
#[derive(Debug, Clone, Copy)]
pub struct LstmStepGates {
    pub forget: LstmGate,
    pub input: LstmGate,
    pub output: LstmGate,
    pub cand: LstmGate,
}

fn expect_shape(
    tape: &Tape,
    v: Var,
    expected: &[usize],
    symbol: impl FnOnce() -> String,
) -> Result<()> {
    let got = tape.value(v).shape();
    if got != expected {
        return Err(NetError::Shape {
            symbol: symbol(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    Ok(())
}

fn gate_preactivation(tape: &mut Tape, x: Var, h: Var, gate: &LstmGate) -> Result<Var> {
    let xin = match gate.zx {
        Some(z) => tape.mul(x, z)?,
        None => x,
    };
    let hin = match gate.zh {
        Some(z) => tape.mul(h, z)?,
        None => h,
    };
    let from_x = tape.matmul(xin, gate.w)?;
    let from_h = tape.matmul(hin, gate.u)?;
    let pre = tape.add(from_x, from_h)?;
    match gate.bias {
        GateBias::Shared(b) => Ok(tape.add_row_vec(pre, b)?),
        GateBias::PerRow(b) => Ok(tape.add(pre, b)?),
    }
}

/// One recurrent step over a batch:
///
/// ```text
/// f = σ((z₀∘x)·W_f + (z₁∘h)·U_f + b_f)      i = σ((z₂∘x)·W_i + (z₃∘h)·U_i + b_i)
/// o = σ((z₄∘x)·W_o + (z₅∘h)·U_o + b_o)      c̃ = tanh((z₆∘x)·W_c + (z₇∘h)·U_c + b_c)
/// c′ = f∘c + i∘c̃                            h′ = o∘tanh(c′)
/// ```
///
/// with every scaling optional. Returns `(h′, c′)`. Every operand shape is
/// validated up front; a violation names the offending symbol (for example
/// `forget.zh`).
pub fn lstm_step(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    gates: &LstmStepGates,
) -> Result<(Var, Var)> {
    let xs = tape.value(x).shape().to_vec();
    let hs = tape.value(h).shape().to_vec();
    if xs.len() != 2 || hs.len() != 2 || xs[0] != hs[0] {
        return Err(NetError::Shape {
            symbol: "x/h".into(),
            expected: xs.clone(),
            got: hs,
        });
    }
    let (b, d, hid) = (xs[0], xs[1], hs[1]);
    expect_shape(tape, c, &[b, hid], || "c".into())?;
    for (name, gate) in [
        ("forget", &gates.forget),
        ("input", &gates.input),
        ("output", &gates.output),
        ("cand", &gates.cand),
    ] {
        expect_shape(tape, gate.w, &[d, hid], || format!("{name}.w"))?;
        expect_shape(tape, gate.u, &[hid, hid], || format!("{name}.u"))?;
        if let Some(z) = gate.zx {
            expect_shape(tape, z, &[b, d], || format!("{name}.zx"))?;
        }
        if let Some(z) = gate.zh {
            expect_shape(tape, z, &[b, hid], || format!("{name}.zh"))?;
        }
        match gate.bias {
            GateBias::Shared(bv) => expect_shape(tape, bv, &[hid], || format!("{name}.b"))?,
            GateBias::PerRow(bv) => expect_shape(tape, bv, &[b, hid], || format!("{name}.b"))?,
        }
    }

    let pre_f = gate_preactivation(tape, x, h, &gates.forget)?;
    let f = tape.sigmoid(pre_f)?;
    let pre_i = gate_preactivation(tape, x, h, &gates.input)?;
    let i = tape.sigmoid(pre_i)?;
    let pre_o = gate_preactivation(tape, x, h, &gates.output)?;
    let o = tape.sigmoid(pre_o)?;
    let pre_c = gate_preactivation(tape, x, h, &gates.cand)?;
    let cand = tape.tanh(pre_c)?;

    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, cand)?;
    let c_next = tape.add(keep, write)?;
    let c_gate = tape.tanh(c_next)?;
    let h_next = tape.mul(o, c_gate)?;
    Ok((h_next, c_next))
}

/// Convolution with a generated per-output-channel scaling: the effective
/// kernel is `diag(z)·W′`, applied as conv-then-scale (equal by linearity,
/// never materialized).
pub fn hyperst_conv_forward(
    tape: &mut Tape,
    x: Var,
    z: Var,
    w: Var,
    padding: Padding,
) -> Result<Var> {
    let y = tape.conv2d(x, w, padding)?;
    Ok(tape.scale_vec(y, z, 0)?)
}

/// Location-dependent variant: every output grid cell gets its own channel
/// scaling vector, generated from that cell's spatial attributes. `z_cells`
/// holds one row per output cell in row-major grid order: `[H_o·W_o, C_out]`.
/// Equals a plain convolution followed by per-cell channel-wise scaling.
pub fn location_hyperst_conv_forward(
    tape: &mut Tape,
    x: Var,
    z_cells: Var,
    w: Var,
    padding: Padding,
) -> Result<Var> {
    let y = tape.conv2d(x, w, padding)?;
    let out_shape = tape.value(y).shape().to_vec();
    let (c_out, ho, wo) = (out_shape[0], out_shape[1], out_shape[2]);
    expect_shape(tape, z_cells, &[ho * wo, c_out], || "Z cells".into())?;
    let z = tape.channels_from_cells(z_cells, ho, wo)?;
    Ok(tape.mul(y, z)?)
}

/// What a layer's parameters cost, split by where they live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCounts {
    /// Ordinary weights shared by all objects (`W′`, `U`).
    pub learned: usize,
    /// Values produced per object at forward time (`z`, generated `b`/`θ`).
    pub generated_per_object: usize,
    /// Head weights introduced to produce them (`d ×` each target size).
    pub hypernet: usize,
}

impl LayerCounts {
    pub fn total(&self) -> usize {
        self.learned + self.hypernet
    }
}

/// Layer families with closed-form parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Head emits the whole parameter tensor of size `n_theta`.
    General { d: usize, n_theta: usize },
    /// Dense with generated row scaling (and optionally a generated bias).
    Dense {
        d: usize,
        n_in: usize,
        n_out: usize,
        bias_head: bool,
    },
    /// Convolution with generated output-channel scaling.
    Conv {
        d: usize,
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
    },
}

/// Closed-form parameter counts: general `d·N_θ`; dense `d·N_in + N_in·N_out`
/// (+ `d·N_out` with a bias head); conv `d·C_out + C_out·C_in·H·W`. Counts
/// cover weight matrices; head bias vectors are extra and excluded here.
pub fn count_params(layer: &LayerKind) -> LayerCounts {
    match *layer {
        LayerKind::General { d, n_theta } => LayerCounts {
            learned: 0,
            generated_per_object: n_theta,
            hypernet: d * n_theta,
        },
        LayerKind::Dense {
            d,
            n_in,
            n_out,
            bias_head,
        } => LayerCounts {
            learned: n_in * n_out,
            generated_per_object: n_in + if bias_head { n_out } else { 0 },
            hypernet: d * n_in + if bias_head { d * n_out } else { 0 },
        },
        LayerKind::Conv {
            d,
            c_in,
            c_out,
            kh,
            kw,
        } => LayerCounts {
            learned: c_out * c_in * kh * kw,
            generated_per_object: c_out,
            hypernet: d * c_out,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn pseudo(shape: &[usize], salt: u64) -> Tensor {
        // Cheap deterministic fill, good enough for oracle comparisons.
        Tensor::from_fn(shape, |i| {
            let k = (i as u64).wrapping_add(salt).wrapping_mul(6364136223846793005);
            ((k >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        })
        .unwrap()
    }

    fn leaf(tape: &mut Tape, t: Tensor) -> Var {
        tape.leaf(t)
    }

    #[test]
    fn zero_trunk_embeds_to_zero() {
        let mut tape = Tape::new();
        let s = leaf(&mut tape, pseudo(&[2, 3], 1));
        let trunk = vec![
            DenseVars {
                w: leaf(&mut tape, Tensor::zeros(&[3, 4]).unwrap()),
                b: leaf(&mut tape, Tensor::zeros(&[4]).unwrap()),
            },
            DenseVars {
                w: leaf(&mut tape, Tensor::zeros(&[4, 2]).unwrap()),
                b: leaf(&mut tape, Tensor::zeros(&[2]).unwrap()),
            },
        ];
        let e = spatial_embed(&mut tape, s, &trunk).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_attributes_embed_identically() {
        let mut tape = Tape::new();
        let row = [0.3, -1.0, 0.8];
        let s = leaf(&mut tape, t(&[2, 3], &[row, row].concat()));
        let trunk = vec![DenseVars {
            w: leaf(&mut tape, pseudo(&[3, 2], 5)),
            b: leaf(&mut tape, pseudo(&[2], 6)),
        }];
        let e = spatial_embed(&mut tape, s, &trunk).unwrap();
        let v = tape.value(e).data();
        assert_eq!(&v[..2], &v[2..]);
    }

    #[test]
    fn embed_matches_hand_composed_chain() {
        let s = pseudo(&[1, 3], 10);
        let (w1, b1) = (pseudo(&[3, 4], 11), pseudo(&[4], 12));
        let (w2, b2) = (pseudo(&[4, 2], 13), pseudo(&[2], 14));
        let mut tape = Tape::new();
        let vs = leaf(&mut tape, s.clone());
        let trunk = vec![
            DenseVars {
                w: leaf(&mut tape, w1.clone()),
                b: leaf(&mut tape, b1.clone()),
            },
            DenseVars {
                w: leaf(&mut tape, w2.clone()),
                b: leaf(&mut tape, b2.clone()),
            },
        ];
        let e = spatial_embed(&mut tape, vs, &trunk).unwrap();

        // Hand composition: tanh(s·W1 + b1)·W2 + b2, scalar loops.
        let mut hid = vec![0.0; 4];
        for j in 0..4 {
            let mut acc = b1.data()[j];
            for k in 0..3 {
                acc += s.data()[k] * w1.data()[k * 4 + j];
            }
            hid[j] = acc.tanh();
        }
        let mut out = vec![0.0; 2];
        for j in 0..2 {
            let mut acc = b2.data()[j];
            for k in 0..4 {
                acc += hid[k] * w2.data()[k * 2 + j];
            }
            out[j] = acc;
        }
        for (got, want) in tape.value(e).data().iter().zip(&out) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn head_at_identity_start_state() {
        let mut tape = Tape::new();
        let hidden = leaf(&mut tape, pseudo(&[2, 3], 20));
        let ones_head = HeadVars {
            w: leaf(&mut tape, Tensor::zeros(&[3, 5]).unwrap()),
            b: leaf(&mut tape, Tensor::ones(&[5]).unwrap()),
        };
        let z = generate(&mut tape, hidden, &ones_head).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 1.0));

        let zero_head = HeadVars {
            w: leaf(&mut tape, Tensor::zeros(&[3, 5]).unwrap()),
            b: leaf(&mut tape, Tensor::zeros(&[5]).unwrap()),
        };
        let b = generate(&mut tape, hidden, &zero_head).unwrap();
        assert!(tape.value(b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn general_layer_identity_theta_is_identity_map() {
        // Head bias holds a flattened 3x3 identity; zero head weight.
        let eye_flat: Vec<f64> = (0..9).map(|i| if i / 3 == i % 3 { 1.0 } else { 0.0 }).collect();
        let mut tape = Tape::new();
        let x = leaf(&mut tape, pseudo(&[1, 3], 30));
        let hidden = leaf(&mut tape, pseudo(&[1, 2], 31));
        let head = HeadVars {
            w: leaf(&mut tape, Tensor::zeros(&[2, 9]).unwrap()),
            b: leaf(&mut tape, t(&[9], &eye_flat)),
        };
        let y = general_hyperst_forward(&mut tape, x, hidden, &head, 3, 3).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn general_layer_same_attributes_same_output() {
        let head_w = pseudo(&[2, 6], 40);
        let head_b = pseudo(&[6], 41);
        let x = pseudo(&[1, 2], 42);
        let hidden = pseudo(&[1, 2], 43);
        let run = || {
            let mut tape = Tape::new();
            let vx = leaf(&mut tape, x.clone());
            let vh = leaf(&mut tape, hidden.clone());
            let head = HeadVars {
                w: leaf(&mut tape, head_w.clone()),
                b: leaf(&mut tape, head_b.clone()),
            };
            let y = general_hyperst_forward(&mut tape, vx, vh, &head, 2, 3).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn scaled_dense_identity_and_annihilation() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, pseudo(&[1, 3], 50));
        let w = leaf(&mut tape, pseudo(&[3, 2], 51));
        let ones = leaf(&mut tape, Tensor::ones(&[1, 3]).unwrap());
        let zeros = leaf(&mut tape, Tensor::zeros(&[1, 3]).unwrap());
        let b = leaf(&mut tape, pseudo(&[1, 2], 52));

        // z = 1, b absent: plain dense.
        let plain = tape.matmul(x, w).unwrap();
        let y = hyperst_dense_forward(&mut tape, x, ones, w, None).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(plain).data());

        // z = 0: output is exactly the bias.
        let y0 = hyperst_dense_forward(&mut tape, x, zeros, w, Some(b)).unwrap();
        assert_eq!(tape.value(y0).data(), tape.value(b).data());
    }

    #[test]
    fn scaled_dense_matches_materialized_diagonal() {
        let x = pseudo(&[1, 3], 60);
        let z = pseudo(&[1, 3], 61);
        let w = pseudo(&[3, 2], 62);
        let mut tape = Tape::new();
        let (vx, vz, vw) = (
            leaf(&mut tape, x.clone()),
            leaf(&mut tape, z.clone()),
            leaf(&mut tape, w.clone()),
        );
        let y = hyperst_dense_forward(&mut tape, vx, vz, vw, None).unwrap();

        // Materialize diag(z)·W, then multiply.
        let mut scaled_w = vec![0.0; 6];
        for r in 0..3 {
            for cidx in 0..2 {
                scaled_w[r * 2 + cidx] = z.data()[r] * w.data()[r * 2 + cidx];
            }
        }
        let mut want = [0.0; 2];
        for (cidx, wv) in want.iter_mut().enumerate() {
            for r in 0..3 {
                *wv += x.data()[r] * scaled_w[r * 2 + cidx];
            }
        }
        for (got, want) in tape.value(y).data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    fn plain_gate(tape: &mut Tape, d: usize, h: usize, salt: u64) -> LstmGate {
        LstmGate {
            w: tape.leaf(pseudo(&[d, h], salt)),
            u: tape.leaf(pseudo(&[h, h], salt + 1)),
            zx: None,
            zh: None,
            bias: GateBias::Shared(tape.leaf(pseudo(&[h], salt + 2))),
        }
    }

    #[test]
    fn unit_scaling_reduces_to_plain_step() {
        let (bsz, d, h) = (2, 2, 3);
        let x = pseudo(&[bsz, d], 70);
        let hprev = pseudo(&[bsz, h], 71);
        let cprev = pseudo(&[bsz, h], 72);

        let mut tape = Tape::new();
        let (vx, vh, vc) = (
            tape.leaf(x.clone()),
            tape.leaf(hprev.clone()),
            tape.leaf(cprev.clone()),
        );
        let gates = LstmStepGates {
            forget: plain_gate(&mut tape, d, h, 80),
            input: plain_gate(&mut tape, d, h, 83),
            output: plain_gate(&mut tape, d, h, 86),
            cand: plain_gate(&mut tape, d, h, 89),
        };
        let (h1, c1) = lstm_step(&mut tape, vx, vh, vc, &gates).unwrap();

        // Same weights, but routed through unit scalings and per-row biases
        // holding the same values.
        let ones_d = tape.leaf(Tensor::ones(&[bsz, d]).unwrap());
        let ones_h = tape.leaf(Tensor::ones(&[bsz, h]).unwrap());
        let scaled = |tape: &mut Tape, g: &LstmGate| {
            let shared = match g.bias {
                GateBias::Shared(b) => b,
                GateBias::PerRow(_) => unreachable!(),
            };
            let row = tape.value(shared).data().to_vec();
            let per_row =
                tape.leaf(Tensor::from_vec(&[bsz, h], row.repeat(bsz)).unwrap());
            LstmGate {
                w: g.w,
                u: g.u,
                zx: Some(ones_d),
                zh: Some(ones_h),
                bias: GateBias::PerRow(per_row),
            }
        };
        let gates2 = LstmStepGates {
            forget: scaled(&mut tape, &gates.forget),
            input: scaled(&mut tape, &gates.input),
            output: scaled(&mut tape, &gates.output),
            cand: scaled(&mut tape, &gates.cand),
        };
        let (h2, c2) = lstm_step(&mut tape, vx, vh, vc, &gates2).unwrap();

        assert_eq!(tape.value(h1).data(), tape.value(h2).data());
        assert_eq!(tape.value(c1).data(), tape.value(c2).data());
    }

    #[test]
    fn zero_state_zero_bias_is_fixed_point() {
        let (d, h) = (2, 3);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, d]).unwrap());
        let hv = tape.leaf(Tensor::zeros(&[1, h]).unwrap());
        let c = tape.leaf(Tensor::zeros(&[1, h]).unwrap());
        let zero_bias_gate = |tape: &mut Tape, salt| {
            let b = tape.leaf(Tensor::zeros(&[h]).unwrap());
            LstmGate {
                w: tape.leaf(pseudo(&[d, h], salt)),
                u: tape.leaf(pseudo(&[h, h], salt + 1)),
                zx: None,
                zh: None,
                bias: GateBias::Shared(b),
            }
        };
        let gates = LstmStepGates {
            forget: zero_bias_gate(&mut tape, 100),
            input: zero_bias_gate(&mut tape, 103),
            output: zero_bias_gate(&mut tape, 106),
            cand: zero_bias_gate(&mut tape, 109),
        };
        let (h1, c1) = lstm_step(&mut tape, x, hv, c, &gates).unwrap();
        assert!(tape.value(h1).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(c1).data().iter().all(|&v| v == 0.0));
    }

    /// Independent scalar implementation of the eight step equations.
    #[allow(clippy::too_many_arguments)]
    fn scalar_reference_step(
        d: usize,
        h: usize,
        x: &[f64],
        hprev: &[f64],
        cprev: &[f64],
        weights: &[(&Tensor, &Tensor, &Tensor, &Tensor, &Tensor)], // w,u,zx,zh,b per gate
    ) -> (Vec<f64>, Vec<f64>) {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut acts = Vec::new();
        for (gi, (w, u, zx, zh, b)) in weights.iter().enumerate() {
            let mut pre = vec![0.0; h];
            for (j, p) in pre.iter_mut().enumerate() {
                let mut acc = b.data()[j];
                for k in 0..d {
                    acc += zx.data()[k] * x[k] * w.data()[k * h + j];
                }
                for k in 0..h {
                    acc += zh.data()[k] * hprev[k] * u.data()[k * h + j];
                }
                *p = if gi == 3 { acc.tanh() } else { sig(acc) };
            }
            acts.push(pre);
        }
        let (f, i, o, cand) = (&acts[0], &acts[1], &acts[2], &acts[3]);
        let c_next: Vec<f64> = (0..h).map(|j| f[j] * cprev[j] + i[j] * cand[j]).collect();
        let h_next: Vec<f64> = (0..h).map(|j| o[j] * c_next[j].tanh()).collect();
        (h_next, c_next)
    }

    #[test]
    fn scaled_step_matches_scalar_reference() {
        let (d, h) = (2, 3);
        let x = pseudo(&[1, d], 200);
        let hprev = pseudo(&[1, h], 201);
        let cprev = pseudo(&[1, h], 202);
        let mk = |salt: u64| {
            (
                pseudo(&[d, h], salt),
                pseudo(&[h, h], salt + 1),
                pseudo(&[1, d], salt + 2),
                pseudo(&[1, h], salt + 3),
                pseudo(&[1, h], salt + 4),
            )
        };
        let per_gate = [mk(210), mk(220), mk(230), mk(240)];

        let mut tape = Tape::new();
        let (vx, vh, vc) = (
            tape.leaf(x.clone()),
            tape.leaf(hprev.clone()),
            tape.leaf(cprev.clone()),
        );
        let gate = |tape: &mut Tape, t: &(Tensor, Tensor, Tensor, Tensor, Tensor)| LstmGate {
            w: tape.leaf(t.0.clone()),
            u: tape.leaf(t.1.clone()),
            zx: Some(tape.leaf(t.2.clone())),
            zh: Some(tape.leaf(t.3.clone())),
            bias: GateBias::PerRow(tape.leaf(t.4.clone())),
        };
        let gates = LstmStepGates {
            forget: gate(&mut tape, &per_gate[0]),
            input: gate(&mut tape, &per_gate[1]),
            output: gate(&mut tape, &per_gate[2]),
            cand: gate(&mut tape, &per_gate[3]),
        };
        let (h1, c1) = lstm_step(&mut tape, vx, vh, vc, &gates).unwrap();

        let refs: Vec<_> = per_gate
            .iter()
            .map(|t| (&t.0, &t.1, &t.2, &t.3, &t.4))
            .collect();
        let (hr, cr) =
            scalar_reference_step(d, h, x.data(), hprev.data(), cprev.data(), &refs);
        for (got, want) in tape.value(h1).data().iter().zip(&hr) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in tape.value(c1).data().iter().zip(&cr) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn step_shape_error_names_symbol() {
        let (d, h) = (2, 3);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, d]).unwrap());
        let hv = tape.leaf(Tensor::zeros(&[1, h]).unwrap());
        let c = tape.leaf(Tensor::zeros(&[1, h]).unwrap());
        let gate = |tape: &mut Tape, salt| plain_gate(tape, d, h, salt);
        let mut gates = LstmStepGates {
            forget: gate(&mut tape, 300),
            input: gate(&mut tape, 303),
            output: gate(&mut tape, 306),
            cand: gate(&mut tape, 309),
        };
        // Wrong zh length on the forget gate.
        gates.forget.zh = Some(tape.leaf(Tensor::zeros(&[1, h + 1]).unwrap()));
        let err = lstm_step(&mut tape, x, hv, c, &gates).unwrap_err();
        match err {
            NetError::Shape { symbol, .. } => assert_eq!(symbol, "forget.zh"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn conv_scaling_identity_and_homogeneity() {
        let x = pseudo(&[2, 4, 4], 400);
        let w = pseudo(&[3, 2, 3, 3], 401);
        let mut tape = Tape::new();
        let (vx, vw) = (tape.leaf(x), tape.leaf(w));
        let plain = tape.conv2d(vx, vw, Padding::Same).unwrap();

        let ones = tape.leaf(Tensor::ones(&[3]).unwrap());
        let y1 = hyperst_conv_forward(&mut tape, vx, ones, vw, Padding::Same).unwrap();
        assert_eq!(tape.value(y1).data(), tape.value(plain).data());

        let twos = tape.leaf(Tensor::full(&[3], 2.0).unwrap());
        let y2 = hyperst_conv_forward(&mut tape, vx, twos, vw, Padding::Same).unwrap();
        let doubled: Vec<f64> = tape.value(plain).data().iter().map(|v| v * 2.0).collect();
        for (got, want) in tape.value(y2).data().iter().zip(&doubled) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_scaling_matches_materialized_kernel() {
        let x = pseudo(&[2, 5, 5], 410);
        let w = pseudo(&[3, 2, 3, 3], 411);
        let z = pseudo(&[3], 412);

        let mut tape = Tape::new();
        let (vx, vw, vz) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(z.clone()));
        let y = hyperst_conv_forward(&mut tape, vx, vz, vw, Padding::Valid).unwrap();

        // Materialize diag(z)·W′ (scale each output-channel block), convolve.
        let scaled = Tensor::from_fn(&[3, 2, 3, 3], |i| z.data()[i / 18] * w.data()[i]).unwrap();
        let vs = tape.leaf(scaled);
        let want = tape.conv2d(vx, vs, Padding::Valid).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(tape.value(want).data()) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn location_scaling_uniform_field_reduces_to_channel_scaling() {
        let x = pseudo(&[2, 4, 4], 420);
        let w = pseudo(&[3, 2, 3, 3], 421);
        let z = pseudo(&[3], 422);
        let mut tape = Tape::new();
        let (vx, vw, vz) = (tape.leaf(x), tape.leaf(w), tape.leaf(z.clone()));
        let uniform = hyperst_conv_forward(&mut tape, vx, vz, vw, Padding::Same).unwrap();

        let cells = tape.leaf(Tensor::from_fn(&[16, 3], |i| z.data()[i % 3]).unwrap());
        let loc = location_hyperst_conv_forward(&mut tape, vx, cells, vw, Padding::Same).unwrap();
        assert_eq!(tape.value(loc).data(), tape.value(uniform).data());
    }

    #[test]
    fn location_scaling_all_ones_is_plain_conv() {
        let x = pseudo(&[1, 3, 3], 430);
        let w = pseudo(&[2, 1, 3, 3], 431);
        let mut tape = Tape::new();
        let (vx, vw) = (tape.leaf(x), tape.leaf(w));
        let plain = tape.conv2d(vx, vw, Padding::Same).unwrap();
        let cells = tape.leaf(Tensor::ones(&[9, 2]).unwrap());
        let loc = location_hyperst_conv_forward(&mut tape, vx, cells, vw, Padding::Same).unwrap();
        assert_eq!(tape.value(loc).data(), tape.value(plain).data());
    }

    #[test]
    fn location_scaling_rejects_wrong_grid() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4, 4]).unwrap());
        let w = tape.leaf(Tensor::zeros(&[2, 1, 3, 3]).unwrap());
        let cells = tape.leaf(Tensor::zeros(&[9, 2]).unwrap()); // 3x3 grid, output is 4x4
        let err =
            location_hyperst_conv_forward(&mut tape, x, cells, w, Padding::Same).unwrap_err();
        assert!(matches!(err, NetError::Shape { .. }));
    }

    #[test]
    fn counts_match_closed_forms() {
        // Dense 8→16 from a 4-dim embedding, bias head off: 32 + 128 = 160.
        let dense = count_params(&LayerKind::Dense {
            d: 4,
            n_in: 8,
            n_out: 16,
            bias_head: false,
        });
        assert_eq!(dense.hypernet, 32);
        assert_eq!(dense.learned, 128);
        assert_eq!(dense.total(), 160);

        // Conv 3→8 channels, 3x3, d=4: 32 + 216.
        let conv = count_params(&LayerKind::Conv {
            d: 4,
            c_in: 3,
            c_out: 8,
            kh: 3,
            kw: 3,
        });
        assert_eq!(conv.hypernet, 32);
        assert_eq!(conv.learned, 216);

        // General head for the same 8x16 dense: 4·128 = 512 > 160.
        let general = count_params(&LayerKind::General { d: 4, n_theta: 128 });
        assert_eq!(general.hypernet, 512);
        assert!(general.hypernet > dense.total());
    }
}

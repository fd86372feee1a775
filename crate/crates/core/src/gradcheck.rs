//! Finite-difference verification of every hand-written backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::LossKind;
use crate::model::{
    bigru_stack_backward, bigru_stack_forward_cached, context_gate, context_gate_backward,
    fusion_head_backward, fusion_head_forward, gru_cell_backward, gru_cell_forward,
    init_params, model_backward, model_forward_cached, projection, projection_backward,
    BiGruStackParams, FusionHeadParams, GruCellParams, HeadOrder, ModelConfig, ModelParams,
};
use crate::numerics::{grad_check, sigmoid, LayerGrad, Matrix};
use crate::EMOTIONS;

/// Finite-difference step.
pub const EPSILON: f64 = 1e-5;
/// Largest acceptable relative error for any layer.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub layer: String,
    pub max_relative_error: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

fn row(v: &[f64]) -> Matrix {
    Matrix::new(1, v.len(), v.to_vec()).expect("finite row")
}

fn check_gru_cell(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (d, h) = (4, 3);
    let cell = init_params(&ModelConfig {
        visual_dim: d,
        audio_dim: 1,
        hidden_dim: h,
        init_seed: rng.gen(),
        ..ModelConfig::default()
    })?
    .visual
    .layers[0]
    .forward
    .clone();
    let mut cell = cell;
    // nonzero biases so every gradient entry is exercised
    for b in [&mut cell.b_z, &mut cell.b_r, &mut cell.b_h] {
        *b = Matrix::uniform(h, 1, 0.5, rng);
    }
    let params: Vec<Matrix> = cell.tensors().into_iter().cloned().collect();
    let input = Matrix::uniform(1, d + h, 0.9, rng);
    let rebuild = |p: &[Matrix]| {
        let mut c = GruCellParams::zeros(d, h);
        for (dst, src) in c.tensors_mut().into_iter().zip(p) {
            *dst = src.clone();
        }
        c
    };
    grad_check(
        |p, x| {
            let v = x.row(0);
            Ok(row(&gru_cell_forward(&v[..d], &v[d..], &rebuild(p))?))
        },
        |p, x, dy| {
            let v = x.row(0);
            let (dx, dh, g) = gru_cell_backward(&v[..d], &v[d..], &rebuild(p), dy.row(0))?;
            Ok(LayerGrad {
                d_input: row(&[dx, dh].concat()),
                d_params: g.tensors().into_iter().cloned().collect(),
            })
        },
        &params,
        &input,
        EPSILON,
        seed,
    )
}

fn check_stack(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (t, d, h) = (5, 3, 2);
    let stack = BiGruStackParams::init(d, h, rng);
    let params: Vec<Matrix> = stack.tensors().into_iter().cloned().collect();
    let input = Matrix::uniform(t, d, 1.0, rng);
    let rebuild = |p: &[Matrix]| {
        let mut s = BiGruStackParams::zeros(d, h);
        for (dst, src) in s.tensors_mut().into_iter().zip(p) {
            *dst = src.clone();
        }
        s
    };
    grad_check(
        |p, x| Ok(bigru_stack_forward_cached(x, &rebuild(p))?.0),
        |p, x, dy| {
            let s = rebuild(p);
            let (_, cache) = bigru_stack_forward_cached(x, &s)?;
            let (g, dx) = bigru_stack_backward(&s, &cache, dy)?;
            Ok(LayerGrad {
                d_input: dx,
                d_params: g.tensors().into_iter().cloned().collect(),
            })
        },
        &params,
        &input,
        EPSILON,
        seed,
    )
}

fn check_gate(n: usize, rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let w = Matrix::uniform(n, n, 0.8, rng);
    let b = Matrix::uniform(n, 1, 0.5, rng);
    let x = Matrix::uniform(1, n, 1.0, rng);
    grad_check(
        |p, x| Ok(row(&context_gate(x.row(0), &p[0], &p[1])?)),
        |p, x, dy| {
            let (dx, gw, gb) = context_gate_backward(x.row(0), &p[0], &p[1], dy.row(0))?;
            Ok(LayerGrad {
                d_input: row(&dx),
                d_params: vec![gw, gb],
            })
        },
        &[w, b],
        &x,
        EPSILON,
        seed,
    )
}

fn check_projection(f: usize, rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let w = Matrix::uniform(EMOTIONS, f, 0.8, rng);
    let b = Matrix::uniform(EMOTIONS, 1, 0.5, rng);
    let x = Matrix::uniform(1, f, 1.0, rng);
    grad_check(
        |p, x| Ok(row(&projection(x.row(0), &p[0], &p[1])?)),
        |p, x, dy| {
            let (dx, gw, gb) = projection_backward(x.row(0), &p[0], &p[1], dy.row(0))?;
            Ok(LayerGrad {
                d_input: row(&dx),
                d_params: vec![gw, gb],
            })
        },
        &[w, b],
        &x,
        EPSILON,
        seed,
    )
}

fn check_sigmoid(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let x = Matrix::uniform(3, EMOTIONS, 3.0, rng);
    grad_check(
        |_, x| Ok(x.map(sigmoid)),
        |_, x, dy| {
            let d: Vec<f64> = x
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&v, &g)| {
                    let s = sigmoid(v);
                    g * s * (1.0 - s)
                })
                .collect();
            Ok(LayerGrad {
                d_input: Matrix::new(x.rows(), x.cols(), d)?,
                d_params: vec![],
            })
        },
        &[],
        &x,
        EPSILON,
        seed,
    )
}

fn check_head(order: HeadOrder, rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let f = 8;
    let head = FusionHeadParams {
        cg1_w: Matrix::uniform(f, f, 0.8, rng),
        cg1_b: Matrix::uniform(f, 1, 0.5, rng),
        proj_w: Matrix::uniform(EMOTIONS, f, 0.8, rng),
        proj_b: Matrix::uniform(EMOTIONS, 1, 0.5, rng),
        cg2_w: Matrix::uniform(EMOTIONS, EMOTIONS, 0.5, rng),
        cg2_b: Matrix::uniform(EMOTIONS, 1, 0.5, rng),
    };
    let params: Vec<Matrix> = head.tensors().into_iter().cloned().collect();
    let rebuild = |p: &[Matrix]| {
        let mut h = FusionHeadParams::zeros(f, EMOTIONS);
        for (dst, src) in h.tensors_mut().into_iter().zip(p) {
            *dst = src.clone();
        }
        h
    };
    let x = Matrix::uniform(3, f, 1.0, rng);
    grad_check(
        |p, x| fusion_head_forward(x, &rebuild(p), order),
        |p, x, dy| {
            let (g, dx) = fusion_head_backward(x, &rebuild(p), order, dy)?;
            Ok(LayerGrad {
                d_input: dx,
                d_params: g.tensors().into_iter().cloned().collect(),
            })
        },
        &params,
        &x,
        EPSILON,
        seed,
    )
}

fn interior(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let d = (0..rows * cols).map(|_| rng.gen_range(0.05..0.95)).collect();
    Matrix::new(rows, cols, d).expect("finite")
}

fn check_loss(kind: LossKind, rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let label = interior(5, EMOTIONS, rng);
    let pred = interior(5, EMOTIONS, rng);
    grad_check(
        |_, p| Ok(Matrix::filled(1, 1, kind.evaluate(p, &label)?.value)),
        |_, p, dy| {
            Ok(LayerGrad {
                d_input: kind.evaluate(p, &label)?.d_pred.scale(dy.get(0, 0)),
                d_params: vec![],
            })
        },
        &[],
        &pred,
        EPSILON,
        seed,
    )
}

/// End-to-end check at visual 6, audio 4, hidden 3, T = 5. The input is the
/// horizontal concatenation of the visual and audio rows.
pub fn check_model(order: HeadOrder, seed: u64) -> Result<f64> {
    let cfg = ModelConfig {
        visual_dim: 6,
        audio_dim: 4,
        hidden_dim: 3,
        emotions: EMOTIONS,
        init_seed: seed,
        head_order: order,
    };
    let base = init_params(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut params: Vec<Matrix> = base.tensors().into_iter().cloned().collect();
    // Random biases everywhere so no gradient is structurally zero.
    for p in params.iter_mut().filter(|p| p.cols() == 1) {
        *p = Matrix::uniform(p.rows(), 1, 0.3, &mut rng);
    }
    let input = Matrix::uniform(5, 10, 1.0, &mut rng);
    let split = |x: &Matrix| -> Result<(Matrix, Matrix)> {
        let v: Vec<&[f64]> = x.row_iter().map(|r| &r[..6]).collect();
        let a: Vec<&[f64]> = x.row_iter().map(|r| &r[6..]).collect();
        Ok((Matrix::from_rows(&v)?, Matrix::from_rows(&a)?))
    };
    let rebuild = |p: &[Matrix]| -> Result<ModelParams> {
        let mut m = ModelParams::zeros(&cfg);
        m.set_tensors(p)?;
        Ok(m)
    };
    grad_check(
        |p, x| {
            let (v, a) = split(x)?;
            Ok(model_forward_cached(&v, &a, &rebuild(p)?)?.0)
        },
        |p, x, dy| {
            let (v, a) = split(x)?;
            let m = rebuild(p)?;
            let (_, cache) = model_forward_cached(&v, &a, &m)?;
            let g = model_backward(&m, &cache, dy)?;
            Ok(LayerGrad {
                d_input: Matrix::hstack(&g.d_visual, &g.d_audio)?,
                d_params: g.params.tensors().into_iter().cloned().collect(),
            })
        },
        &params,
        &input,
        EPSILON,
        seed,
    )
}

/// Runs the check for every layer, every loss and the composed model.
pub fn gradient_suite(seed: u64) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |layer: &str, e: f64| {
        out.push(LayerCheck {
            layer: layer.to_owned(),
            max_relative_error: e,
        })
    };
    push("gru_cell", check_gru_cell(&mut rng, seed)?);
    push("bigru_stack", check_stack(&mut rng, seed)?);
    push("context_gate_fused", check_gate(12, &mut rng, seed)?);
    push("context_gate_emotions", check_gate(EMOTIONS, &mut rng, seed)?);
    push("projection", check_projection(12, &mut rng, seed)?);
    push("sigmoid_head", check_sigmoid(&mut rng, seed)?);
    push("fusion_head", check_head(HeadOrder::GateProjectGate, &mut rng, seed)?);
    push(
        "fusion_head_alt_order",
        check_head(HeadOrder::ProjectSigmoidGate, &mut rng, seed)?,
    );
    push("loss_l1", check_loss(LossKind::L1, &mut rng, seed)?);
    push("loss_kl", check_loss(LossKind::Kl, &mut rng, seed)?);
    push("loss_ccc", check_loss(LossKind::Ccc, &mut rng, seed)?);
    push("model", check_model(HeadOrder::GateProjectGate, seed)?);
    push("model_alt_order", check_model(HeadOrder::ProjectSigmoidGate, seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes() {
        for seed in [1, 7] {
            for c in gradient_suite(seed).unwrap() {
                assert!(c.passed(), "seed {seed} {}: {}", c.layer, c.max_relative_error);
            }
        }
    }
}

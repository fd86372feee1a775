//! Per-modality bidirectional GRU stacks with context-gated late fusion.
//!
//! Each modality runs through its own two-layer bidirectional GRU (no weight
//! sharing). Per time step, the top-layer outputs of both stacks are
//! concatenated, passed through a context gate, projected to the emotion
//! channels, gated again and squashed with a sigmoid.
//!
//! GRU recurrence (reset gate applied to `U_h h_prev`):
//!
//! ```text
//! z  = σ(W_z x + U_z h_prev + b_z)
//! r  = σ(W_r x + U_r h_prev + b_r)
//! h̃  = tanh(W_h x + U_h (r ∘ h_prev) + b_h)
//! h  = (1 − z) ∘ h_prev + z ∘ h̃
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    affine_into, matvec_acc, matvec_t_acc, outer_acc, sigmoid, tanh, vec_acc, Matrix,
};
use crate::EMOTIONS;

/// Where the second context gate sits relative to the output sigmoid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadOrder {
    /// fuse → gate → project → gate → sigmoid
    #[default]
    GateProjectGate,
    /// fuse → gate → project → sigmoid → gate
    ProjectSigmoidGate,
}

impl std::str::FromStr for HeadOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate_project_gate" => Ok(HeadOrder::GateProjectGate),
            "project_sigmoid_gate" => Ok(HeadOrder::ProjectSigmoidGate),
            other => Err(Error::input(format!("unknown head order {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub hidden_dim: usize,
    pub emotions: usize,
    pub init_seed: u64,
    #[serde(default)]
    pub head_order: HeadOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            visual_dim: 1536,
            audio_dim: 128,
            hidden_dim: 256,
            emotions: EMOTIONS,
            init_seed: 0,
            head_order: HeadOrder::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.visual_dim == 0 || self.audio_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::input("model dimensions must be positive"));
        }
        if self.emotions != EMOTIONS {
            return Err(Error::input(format!(
                "model must predict exactly {EMOTIONS} emotions, config says {}",
                self.emotions
            )));
        }
        Ok(())
    }

    /// Width of the concatenated fused representation.
    pub fn fused_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    /// Number of scalar weights implied by this configuration.
    pub fn param_count(&self) -> usize {
        let h = self.hidden_dim;
        let cell = |d: usize| 3 * (h * d + h * h + h);
        let stack = |d: usize| 2 * cell(d) + 2 * cell(2 * h);
        let f = self.fused_dim();
        let e = self.emotions;
        stack(self.visual_dim) + stack(self.audio_dim) + (f * f + f) + (e * f + e) + (e * e + e)
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::uniform(rows, cols, s, rng)
}

/// Weights of one GRU direction.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams {
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub b_z: Matrix,
    pub w_r: Matrix,
    pub u_r: Matrix,
    pub b_r: Matrix,
    pub w_h: Matrix,
    pub u_h: Matrix,
    pub b_h: Matrix,
}

impl GruCellParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = || Matrix::zeros(hidden_dim, input_dim);
        let u = || Matrix::zeros(hidden_dim, hidden_dim);
        let b = || Matrix::zeros(hidden_dim, 1);
        Self {
            w_z: w(),
            u_z: u(),
            b_z: b(),
            w_r: w(),
            u_r: u(),
            b_r: b(),
            w_h: w(),
            u_h: u(),
            b_h: b(),
        }
    }

    fn init(input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(input_dim, hidden_dim);
        p.w_z = glorot(hidden_dim, input_dim, rng);
        p.u_z = glorot(hidden_dim, hidden_dim, rng);
        p.w_r = glorot(hidden_dim, input_dim, rng);
        p.u_r = glorot(hidden_dim, hidden_dim, rng);
        p.w_h = glorot(hidden_dim, input_dim, rng);
        p.u_h = glorot(hidden_dim, hidden_dim, rng);
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.rows()
    }

    /// Canonical order: W_z, U_z, b_z, W_r, U_r, b_r, W_h, U_h, b_h.
    pub fn tensors(&self) -> [&Matrix; 9] {
        [
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_h,
            &self.u_h, &self.b_h,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 9] {
        [
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
        ]
    }

    fn check(&self) -> Result<()> {
        let (h, d) = self.w_z.shape();
        let expected = [(h, d), (h, h), (h, 1)];
        for (i, t) in self.tensors().iter().enumerate() {
            if t.shape() != expected[i % 3] {
                return Err(Error::Dimension {
                    op: "gru cell params",
                    left: expected[i % 3],
                    right: t.shape(),
                });
            }
        }
        Ok(())
    }
}

/// Both directions of one bidirectional layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BiGruLayerParams {
    pub forward: GruCellParams,
    pub backward: GruCellParams,
}

impl BiGruLayerParams {
    fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            forward: GruCellParams::zeros(input_dim, hidden_dim),
            backward: GruCellParams::zeros(input_dim, hidden_dim),
        }
    }

    fn init(input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let forward = GruCellParams::init(input_dim, hidden_dim, rng);
        let backward = GruCellParams::init(input_dim, hidden_dim, rng);
        Self { forward, backward }
    }
}

/// A two-layer bidirectional GRU. Layer 2 consumes `[h_fwd ‖ h_bwd]` of layer 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BiGruStackParams {
    pub layers: [BiGruLayerParams; 2],
}

impl BiGruStackParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            layers: [
                BiGruLayerParams::zeros(input_dim, hidden_dim),
                BiGruLayerParams::zeros(2 * hidden_dim, hidden_dim),
            ],
        }
    }

    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let l1 = BiGruLayerParams::init(input_dim, hidden_dim, rng);
        let l2 = BiGruLayerParams::init(2 * hidden_dim, hidden_dim, rng);
        Self { layers: [l1, l2] }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].forward.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[1].forward.hidden_dim()
    }

    /// Layer 1 forward, layer 1 backward, layer 2 forward, layer 2 backward.
    pub fn cells(&self) -> [&GruCellParams; 4] {
        [
            &self.layers[0].forward,
            &self.layers[0].backward,
            &self.layers[1].forward,
            &self.layers[1].backward,
        ]
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.cells().into_iter().flat_map(|c| c.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let [l1, l2] = &mut self.layers;
        [&mut l1.forward, &mut l1.backward, &mut l2.forward, &mut l2.backward]
            .into_iter()
            .flat_map(|c| c.tensors_mut())
            .collect()
    }

    fn check(&self) -> Result<()> {
        for c in self.cells() {
            c.check()?;
        }
        let h1 = self.layers[0].forward.hidden_dim();
        for (a, b) in [
            (&self.layers[0].forward, &self.layers[0].backward),
            (&self.layers[1].forward, &self.layers[1].backward),
        ] {
            if a.w_z.shape() != b.w_z.shape() {
                return Err(Error::Dimension {
                    op: "bidirectional layer",
                    left: a.w_z.shape(),
                    right: b.w_z.shape(),
                });
            }
        }
        if self.layers[1].forward.input_dim() != 2 * h1 {
            return Err(Error::Dimension {
                op: "stack layer 2 input",
                left: (self.layers[1].forward.hidden_dim(), 2 * h1),
                right: self.layers[1].forward.w_z.shape(),
            });
        }
        Ok(())
    }
}

/// Fusion head: two context gates around the projection to emotions.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHeadParams {
    pub cg1_w: Matrix,
    pub cg1_b: Matrix,
    pub proj_w: Matrix,
    pub proj_b: Matrix,
    pub cg2_w: Matrix,
    pub cg2_b: Matrix,
}

impl FusionHeadParams {
    pub fn zeros(fused_dim: usize, emotions: usize) -> Self {
        Self {
            cg1_w: Matrix::zeros(fused_dim, fused_dim),
            cg1_b: Matrix::zeros(fused_dim, 1),
            proj_w: Matrix::zeros(emotions, fused_dim),
            proj_b: Matrix::zeros(emotions, 1),
            cg2_w: Matrix::zeros(emotions, emotions),
            cg2_b: Matrix::zeros(emotions, 1),
        }
    }

    fn init(fused_dim: usize, emotions: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(fused_dim, emotions);
        p.cg1_w = glorot(fused_dim, fused_dim, rng);
        p.proj_w = glorot(emotions, fused_dim, rng);
        p.cg2_w = glorot(emotions, emotions, rng);
        p
    }

    pub fn tensors(&self) -> [&Matrix; 6] {
        [
            &self.cg1_w,
            &self.cg1_b,
            &self.proj_w,
            &self.proj_b,
            &self.cg2_w,
            &self.cg2_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.cg1_w,
            &mut self.cg1_b,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.cg2_w,
            &mut self.cg2_b,
        ]
    }
}

/// Every learnable weight of the model plus the configuration it was built
/// from. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub visual: BiGruStackParams,
    pub audio: BiGruStackParams,
    pub head: FusionHeadParams,
    pub config: ModelConfig,
}

impl ModelParams {
    /// All-zero parameters shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden_dim;
        Self {
            visual: BiGruStackParams::zeros(config.visual_dim, h),
            audio: BiGruStackParams::zeros(config.audio_dim, h),
            head: FusionHeadParams::zeros(config.fused_dim(), config.emotions),
            config: config.clone(),
        }
    }

    /// Tensors in canonical serialization order: visual stack, audio stack,
    /// then head (cg1, proj, cg2).
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.visual.tensors();
        v.extend(self.audio.tensors());
        v.extend(self.head.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.visual.tensors_mut();
        v.extend(self.audio.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn from_flat(config: &ModelConfig, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        if flat.len() != config.param_count() {
            return Err(Error::input(format!(
                "{} weights supplied, configuration needs {}",
                flat.len(),
                config.param_count()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite weight"));
        }
        let mut p = Self::zeros(config);
        let mut offset = 0;
        for t in p.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(p)
    }

    /// Overwrites every tensor from a slice in canonical order.
    pub fn set_tensors(&mut self, tensors: &[Matrix]) -> Result<()> {
        let mut dst = self.tensors_mut();
        if dst.len() != tensors.len() {
            return Err(Error::input("tensor count mismatch"));
        }
        for (d, s) in dst.iter_mut().zip(tensors) {
            if d.shape() != s.shape() {
                return Err(Error::Dimension {
                    op: "set_tensors",
                    left: d.shape(),
                    right: s.shape(),
                });
            }
            **d = s.clone();
        }
        Ok(())
    }

    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        self.visual.check()?;
        self.audio.check()?;
        let c = &self.config;
        let checks = [
            (self.visual.input_dim(), c.visual_dim, "visual input"),
            (self.audio.input_dim(), c.audio_dim, "audio input"),
            (self.visual.hidden_dim(), c.hidden_dim, "visual hidden"),
            (self.audio.hidden_dim(), c.hidden_dim, "audio hidden"),
        ];
        for (got, want, what) in checks {
            if got != want {
                return Err(Error::Input(format!("{what} dim {got}, config says {want}")));
            }
        }
        let f = c.fused_dim();
        let e = c.emotions;
        let head = &self.head;
        let shapes = [(f, f), (f, 1), (e, f), (e, 1), (e, e), (e, 1)];
        for (t, s) in head.tensors().iter().zip(shapes) {
            if t.shape() != s {
                return Err(Error::Dimension {
                    op: "fusion head",
                    left: s,
                    right: t.shape(),
                });
            }
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases; deterministic in `config.init_seed`.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let h = config.hidden_dim;
    let visual = BiGruStackParams::init(config.visual_dim, h, &mut rng);
    let audio = BiGruStackParams::init(config.audio_dim, h, &mut rng);
    let head = FusionHeadParams::init(config.fused_dim(), config.emotions, &mut rng);
    Ok(ModelParams {
        visual,
        audio,
        head,
        config: config.clone(),
    })
}

// ---------------------------------------------------------------------------
// GRU cell

#[derive(Debug, Clone)]
struct StepCache {
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    h_cand: Vec<f64>,
    rh: Vec<f64>,
}

fn cell_step(p: &GruCellParams, x: &[f64], h_prev: &[f64]) -> (Vec<f64>, StepCache) {
    let hd = p.hidden_dim();
    let mut z = vec![0.0; hd];
    affine_into(&p.w_z, x, &p.b_z, &mut z);
    matvec_acc(&p.u_z, h_prev, &mut z);
    z.iter_mut().for_each(|v| *v = sigmoid(*v));

    let mut r = vec![0.0; hd];
    affine_into(&p.w_r, x, &p.b_r, &mut r);
    matvec_acc(&p.u_r, h_prev, &mut r);
    r.iter_mut().for_each(|v| *v = sigmoid(*v));

    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let mut h_cand = vec![0.0; hd];
    affine_into(&p.w_h, x, &p.b_h, &mut h_cand);
    matvec_acc(&p.u_h, &rh, &mut h_cand);
    h_cand.iter_mut().for_each(|v| *v = tanh(*v));

    let h = (0..hd)
        .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * h_cand[i])
        .collect();
    let cache = StepCache {
        h_prev: h_prev.to_vec(),
        z,
        r,
        h_cand,
        rh,
    };
    (h, cache)
}

/// Backward through one step. Accumulates parameter gradients into `g` and
/// input gradients into `dx`; returns the gradient w.r.t. `h_prev`.
fn cell_step_backward(
    p: &GruCellParams,
    g: &mut GruCellParams,
    x: &[f64],
    c: &StepCache,
    dh: &[f64],
    dx: &mut [f64],
) -> Vec<f64> {
    let hd = dh.len();
    let mut dh_prev = vec![0.0; hd];
    let mut da_h = vec![0.0; hd];
    let mut da_z = vec![0.0; hd];
    for i in 0..hd {
        let dhc = dh[i] * c.z[i];
        let dz = dh[i] * (c.h_cand[i] - c.h_prev[i]);
        dh_prev[i] = dh[i] * (1.0 - c.z[i]);
        da_h[i] = dhc * (1.0 - c.h_cand[i] * c.h_cand[i]);
        da_z[i] = dz * c.z[i] * (1.0 - c.z[i]);
    }

    outer_acc(&mut g.w_h, &da_h, x);
    outer_acc(&mut g.u_h, &da_h, &c.rh);
    vec_acc(&mut g.b_h, &da_h);
    matvec_t_acc(&p.w_h, &da_h, dx);
    let mut drh = vec![0.0; hd];
    matvec_t_acc(&p.u_h, &da_h, &mut drh);

    let mut da_r = vec![0.0; hd];
    for i in 0..hd {
        let dr = drh[i] * c.h_prev[i];
        dh_prev[i] += drh[i] * c.r[i];
        da_r[i] = dr * c.r[i] * (1.0 - c.r[i]);
    }

    outer_acc(&mut g.w_z, &da_z, x);
    outer_acc(&mut g.u_z, &da_z, &c.h_prev);
    vec_acc(&mut g.b_z, &da_z);
    matvec_t_acc(&p.w_z, &da_z, dx);
    matvec_t_acc(&p.u_z, &da_z, &mut dh_prev);

    outer_acc(&mut g.w_r, &da_r, x);
    outer_acc(&mut g.u_r, &da_r, &c.h_prev);
    vec_acc(&mut g.b_r, &da_r);
    matvec_t_acc(&p.w_r, &da_r, dx);
    matvec_t_acc(&p.u_r, &da_r, &mut dh_prev);

    dh_prev
}

/// One GRU step.
pub fn gru_cell_forward(x: &[f64], h_prev: &[f64], p: &GruCellParams) -> Result<Vec<f64>> {
    p.check()?;
    if x.len() != p.input_dim() || h_prev.len() != p.hidden_dim() {
        return Err(Error::Dimension {
            op: "gru_cell_forward",
            left: (p.hidden_dim(), p.input_dim()),
            right: (h_prev.len(), x.len()),
        });
    }
    Ok(cell_step(p, x, h_prev).0)
}

/// Gradients of one GRU step with respect to its input, previous state and
/// parameters, given the gradient of the new state.
pub fn gru_cell_backward(
    x: &[f64],
    h_prev: &[f64],
    p: &GruCellParams,
    dh: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, GruCellParams)> {
    gru_cell_forward(x, h_prev, p)?;
    if dh.len() != p.hidden_dim() {
        return Err(Error::input("dh length must equal hidden dim"));
    }
    let (_, cache) = cell_step(p, x, h_prev);
    let mut g = GruCellParams::zeros(p.input_dim(), p.hidden_dim());
    let mut dx = vec![0.0; x.len()];
    let dh_prev = cell_step_backward(p, &mut g, x, &cache, dh, &mut dx);
    Ok((dx, dh_prev, g))
}

// ---------------------------------------------------------------------------
// Bidirectional stack

#[derive(Debug, Clone)]
struct DirectionCache {
    steps: Vec<StepCache>,
}

/// Runs one direction over all rows of `input`; `reverse` scans from the
/// last row to the first. The initial state is zero.
fn scan(p: &GruCellParams, input: &Matrix, reverse: bool) -> (Matrix, DirectionCache) {
    let t_len = input.rows();
    let hd = p.hidden_dim();
    let mut out = Matrix::zeros(t_len, hd);
    let mut steps: Vec<Option<StepCache>> = vec![None; t_len];
    let mut h = vec![0.0; hd];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..t_len).rev())
    } else {
        Box::new(0..t_len)
    };
    for t in order {
        let (h_new, cache) = cell_step(p, input.row(t), &h);
        out.row_mut(t).copy_from_slice(&h_new);
        steps[t] = Some(cache);
        h = h_new;
    }
    let steps = steps.into_iter().map(|s| s.expect("every step visited")).collect();
    (out, DirectionCache { steps })
}

fn scan_backward(
    p: &GruCellParams,
    g: &mut GruCellParams,
    input: &Matrix,
    cache: &DirectionCache,
    d_out: &Matrix,
    reverse: bool,
    d_input: &mut Matrix,
) {
    let t_len = input.rows();
    let hd = p.hidden_dim();
    let mut carry = vec![0.0; hd];
    // Visit steps in the opposite order of the forward scan.
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new(0..t_len)
    } else {
        Box::new((0..t_len).rev())
    };
    for t in order {
        let dh: Vec<f64> = d_out.row(t).iter().zip(&carry).map(|(a, b)| a + b).collect();
        carry = cell_step_backward(p, g, input.row(t), &cache.steps[t], &dh, d_input.row_mut(t));
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    fwd: DirectionCache,
    bwd: DirectionCache,
}

fn layer_forward(p: &BiGruLayerParams, input: &Matrix) -> Result<(Matrix, LayerCache)> {
    let (hf, fwd) = scan(&p.forward, input, false);
    let (hb, bwd) = scan(&p.backward, input, true);
    let out = Matrix::hstack(&hf, &hb)?;
    Ok((
        out,
        LayerCache {
            input: input.clone(),
            fwd,
            bwd,
        },
    ))
}

fn layer_backward(
    p: &BiGruLayerParams,
    g: &mut BiGruLayerParams,
    cache: &LayerCache,
    d_out: &Matrix,
) -> Matrix {
    let hd = p.forward.hidden_dim();
    let t_len = d_out.rows();
    let mut d_fwd = Matrix::zeros(t_len, hd);
    let mut d_bwd = Matrix::zeros(t_len, hd);
    for t in 0..t_len {
        let row = d_out.row(t);
        d_fwd.row_mut(t).copy_from_slice(&row[..hd]);
        d_bwd.row_mut(t).copy_from_slice(&row[hd..]);
    }
    let mut d_input = Matrix::zeros(cache.input.rows(), cache.input.cols());
    scan_backward(&p.forward, &mut g.forward, &cache.input, &cache.fwd, &d_fwd, false, &mut d_input);
    scan_backward(&p.backward, &mut g.backward, &cache.input, &cache.bwd, &d_bwd, true, &mut d_input);
    d_input
}

/// Cached intermediate values of a stack forward pass.
#[derive(Debug, Clone)]
pub struct StackCache {
    layers: Vec<LayerCache>,
    hidden_dim: usize,
    input_dim: usize,
}

pub fn bigru_stack_forward_cached(
    seq: &Matrix,
    p: &BiGruStackParams,
) -> Result<(Matrix, StackCache)> {
    p.check()?;
    if seq.rows() == 0 {
        return Err(Error::input("empty sequence"));
    }
    if seq.cols() != p.input_dim() {
        return Err(Error::Dimension {
            op: "bigru_stack_forward",
            left: (seq.rows(), p.input_dim()),
            right: seq.shape(),
        });
    }
    let (out1, c1) = layer_forward(&p.layers[0], seq)?;
    let (out2, c2) = layer_forward(&p.layers[1], &out1)?;
    Ok((
        out2,
        StackCache {
            layers: vec![c1, c2],
            hidden_dim: p.hidden_dim(),
            input_dim: p.input_dim(),
        },
    ))
}

/// Runs the two-layer bidirectional stack over a `T × D` sequence and returns
/// `T × 2H` outputs, each row `[h_fwd_t ‖ h_bwd_t]` of the top layer.
pub fn bigru_stack_forward(seq: &Matrix, p: &BiGruStackParams) -> Result<Matrix> {
    bigru_stack_forward_cached(seq, p).map(|(out, _)| out)
}

/// Backpropagation through time for a stack. Returns parameter gradients and
/// the gradient with respect to the input sequence.
pub fn bigru_stack_backward(
    p: &BiGruStackParams,
    cache: &StackCache,
    d_out: &Matrix,
) -> Result<(BiGruStackParams, Matrix)> {
    if cache.hidden_dim != p.hidden_dim() || cache.input_dim != p.input_dim() {
        return Err(Error::Internal("stack cache does not match parameters".into()));
    }
    let t_len = cache.layers[0].input.rows();
    if d_out.shape() != (t_len, 2 * p.hidden_dim()) {
        return Err(Error::Internal(format!(
            "stack output gradient {:?} does not match cached forward ({t_len}, {})",
            d_out.shape(),
            2 * p.hidden_dim()
        )));
    }
    let mut g = BiGruStackParams::zeros(p.input_dim(), p.layers[0].forward.hidden_dim());
    let d_mid = layer_backward(&p.layers[1], &mut g.layers[1], &cache.layers[1], d_out);
    let d_in = layer_backward(&p.layers[0], &mut g.layers[0], &cache.layers[0], &d_mid);
    Ok((g, d_in))
}

// ---------------------------------------------------------------------------
// Context gating and head

/// `y = σ(W x + b) ∘ x`.
pub fn context_gate(x: &[f64], w: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    check_gate(x.len(), w, b)?;
    let s = gate_weights(x, w, b);
    Ok(s.iter().zip(x).map(|(a, b)| a * b).collect())
}

fn check_gate(n: usize, w: &Matrix, b: &Matrix) -> Result<()> {
    if w.shape() != (n, n) || b.shape() != (n, 1) {
        return Err(Error::Dimension {
            op: "context_gate",
            left: (n, n),
            right: w.shape(),
        });
    }
    Ok(())
}

fn gate_weights(x: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; x.len()];
    affine_into(w, x, b, &mut s);
    s.iter_mut().for_each(|v| *v = sigmoid(*v));
    s
}

/// Backward of [`context_gate`] given the forward input `x` and gate values
/// `s`. Accumulates into `gw`, `gb` and returns `dL/dx`.
fn gate_backward(
    x: &[f64],
    s: &[f64],
    w: &Matrix,
    dy: &[f64],
    gw: &mut Matrix,
    gb: &mut Matrix,
) -> Vec<f64> {
    let n = x.len();
    let mut dx: Vec<f64> = (0..n).map(|i| dy[i] * s[i]).collect();
    let da: Vec<f64> = (0..n).map(|i| dy[i] * x[i] * s[i] * (1.0 - s[i])).collect();
    outer_acc(gw, &da, x);
    vec_acc(gb, &da);
    matvec_t_acc(w, &da, &mut dx);
    dx
}

/// Gradients of `Σ dy ∘ context_gate(x, W, b)`: `(dx, dW, db)`.
pub fn context_gate_backward(
    x: &[f64],
    w: &Matrix,
    b: &Matrix,
    dy: &[f64],
) -> Result<(Vec<f64>, Matrix, Matrix)> {
    check_gate(x.len(), w, b)?;
    let s = gate_weights(x, w, b);
    let mut gw = Matrix::zeros(w.rows(), w.cols());
    let mut gb = Matrix::zeros(b.rows(), 1);
    let dx = gate_backward(x, &s, w, dy, &mut gw, &mut gb);
    Ok((dx, gw, gb))
}

/// Backward of `y = W x + b`: accumulates into `gw`, `gb`, returns `dL/dx`.
fn affine_backward(x: &[f64], w: &Matrix, dy: &[f64], gw: &mut Matrix, gb: &mut Matrix) -> Vec<f64> {
    outer_acc(gw, dy, x);
    vec_acc(gb, dy);
    let mut dx = vec![0.0; x.len()];
    matvec_t_acc(w, dy, &mut dx);
    dx
}

fn check_affine(n_in: usize, w: &Matrix, b: &Matrix) -> Result<()> {
    if w.cols() != n_in || b.shape() != (w.rows(), 1) {
        return Err(Error::Dimension {
            op: "projection",
            left: (w.rows(), n_in),
            right: w.shape(),
        });
    }
    Ok(())
}

/// `y = W x + b`.
pub fn projection(x: &[f64], w: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    check_affine(x.len(), w, b)?;
    let mut y = vec![0.0; w.rows()];
    affine_into(w, x, b, &mut y);
    Ok(y)
}

/// Gradients of `Σ dy ∘ projection(x, W, b)`: `(dx, dW, db)`.
pub fn projection_backward(
    x: &[f64],
    w: &Matrix,
    b: &Matrix,
    dy: &[f64],
) -> Result<(Vec<f64>, Matrix, Matrix)> {
    check_affine(x.len(), w, b)?;
    let mut gw = Matrix::zeros(w.rows(), w.cols());
    let mut gb = Matrix::zeros(b.rows(), 1);
    let dx = affine_backward(x, w, dy, &mut gw, &mut gb);
    Ok((dx, gw, gb))
}

#[derive(Debug, Clone)]
struct HeadRowCache {
    s1: Vec<f64>,
    g1: Vec<f64>,
    proj: Vec<f64>,
    /// Input of the second gate: the projection, or its sigmoid.
    gate2_in: Vec<f64>,
    s2: Vec<f64>,
}

fn head_row(
    head: &FusionHeadParams,
    order: HeadOrder,
    fused: &[f64],
    out: &mut [f64],
) -> HeadRowCache {
    let s1 = gate_weights(fused, &head.cg1_w, &head.cg1_b);
    let g1: Vec<f64> = s1.iter().zip(fused).map(|(a, b)| a * b).collect();
    let mut proj = vec![0.0; head.proj_b.rows()];
    affine_into(&head.proj_w, &g1, &head.proj_b, &mut proj);
    let gate2_in = match order {
        HeadOrder::GateProjectGate => proj.clone(),
        HeadOrder::ProjectSigmoidGate => proj.iter().map(|&v| sigmoid(v)).collect(),
    };
    let s2 = gate_weights(&gate2_in, &head.cg2_w, &head.cg2_b);
    for i in 0..out.len() {
        let g2 = s2[i] * gate2_in[i];
        out[i] = match order {
            HeadOrder::GateProjectGate => sigmoid(g2),
            HeadOrder::ProjectSigmoidGate => g2,
        };
    }
    HeadRowCache {
        s1,
        g1,
        proj,
        gate2_in,
        s2,
    }
}

fn head_row_backward(
    head: &FusionHeadParams,
    g: &mut FusionHeadParams,
    order: HeadOrder,
    fused: &[f64],
    c: &HeadRowCache,
    y: &[f64],
    dy: &[f64],
) -> Vec<f64> {
    let dg2: Vec<f64> = match order {
        HeadOrder::GateProjectGate => (0..dy.len()).map(|i| dy[i] * y[i] * (1.0 - y[i])).collect(),
        HeadOrder::ProjectSigmoidGate => dy.to_vec(),
    };
    let d_gate2_in = gate_backward(&c.gate2_in, &c.s2, &head.cg2_w, &dg2, &mut g.cg2_w, &mut g.cg2_b);
    let d_proj: Vec<f64> = match order {
        HeadOrder::GateProjectGate => d_gate2_in,
        HeadOrder::ProjectSigmoidGate => (0..d_gate2_in.len())
            .map(|i| d_gate2_in[i] * c.gate2_in[i] * (1.0 - c.gate2_in[i]))
            .collect(),
    };
    debug_assert_eq!(c.proj.len(), d_proj.len());
    let dg1 = affine_backward(&c.g1, &head.proj_w, &d_proj, &mut g.proj_w, &mut g.proj_b);
    gate_backward(fused, &c.s1, &head.cg1_w, &dg1, &mut g.cg1_w, &mut g.cg1_b)
}

fn check_head(fused: &Matrix, head: &FusionHeadParams) -> Result<()> {
    let f = head.cg1_w.rows();
    let e = head.proj_w.rows();
    let shapes = [(f, f), (f, 1), (e, f), (e, 1), (e, e), (e, 1)];
    for (t, s) in head.tensors().iter().zip(shapes) {
        if t.shape() != s {
            return Err(Error::Dimension {
                op: "fusion head",
                left: s,
                right: t.shape(),
            });
        }
    }
    if fused.cols() != f {
        return Err(Error::Dimension {
            op: "fusion head input",
            left: (fused.rows(), f),
            right: fused.shape(),
        });
    }
    Ok(())
}

/// Applies the fusion head to every row of a fused `T × F` matrix.
pub fn fusion_head_forward(
    fused: &Matrix,
    head: &FusionHeadParams,
    order: HeadOrder,
) -> Result<Matrix> {
    check_head(fused, head)?;
    let mut out = Matrix::zeros(fused.rows(), head.proj_w.rows());
    for t in 0..fused.rows() {
        head_row(head, order, fused.row(t), out.row_mut(t));
    }
    Ok(out)
}

/// Gradients of `Σ d_out ∘ fusion_head_forward(..)`: head parameters and
/// the fused input.
pub fn fusion_head_backward(
    fused: &Matrix,
    head: &FusionHeadParams,
    order: HeadOrder,
    d_out: &Matrix,
) -> Result<(FusionHeadParams, Matrix)> {
    check_head(fused, head)?;
    let e = head.proj_w.rows();
    if d_out.shape() != (fused.rows(), e) {
        return Err(Error::Dimension {
            op: "fusion head output gradient",
            left: (fused.rows(), e),
            right: d_out.shape(),
        });
    }
    let mut g = FusionHeadParams::zeros(fused.cols(), e);
    let mut d_fused = Matrix::zeros(fused.rows(), fused.cols());
    let mut y = vec![0.0; e];
    for t in 0..fused.rows() {
        let cache = head_row(head, order, fused.row(t), &mut y);
        let df = head_row_backward(head, &mut g, order, fused.row(t), &cache, &y, d_out.row(t));
        d_fused.row_mut(t).copy_from_slice(&df);
    }
    Ok((g, d_fused))
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    config: ModelConfig,
    visual: StackCache,
    audio: StackCache,
    fused: Matrix,
    rows: Vec<HeadRowCache>,
    output: Matrix,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn len(&self) -> usize {
        self.output.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.output.rows() == 0
    }
}

fn check_inputs(visual: &Matrix, audio: &Matrix, p: &ModelParams) -> Result<()> {
    if visual.rows() != audio.rows() {
        return Err(Error::Alignment {
            visual: visual.rows(),
            audio: audio.rows(),
        });
    }
    if visual.cols() != p.config.visual_dim {
        return Err(Error::Dimension {
            op: "model_forward visual",
            left: (visual.rows(), p.config.visual_dim),
            right: visual.shape(),
        });
    }
    if audio.cols() != p.config.audio_dim {
        return Err(Error::Dimension {
            op: "model_forward audio",
            left: (audio.rows(), p.config.audio_dim),
            right: audio.shape(),
        });
    }
    Ok(())
}

pub fn model_forward_cached(
    visual: &Matrix,
    audio: &Matrix,
    p: &ModelParams,
) -> Result<(Matrix, ForwardCache)> {
    p.check()?;
    check_inputs(visual, audio, p)?;
    let (hv, cv) = bigru_stack_forward_cached(visual, &p.visual)?;
    let (ha, ca) = bigru_stack_forward_cached(audio, &p.audio)?;
    let fused = Matrix::hstack(&hv, &ha)?;
    let t_len = fused.rows();
    let mut output = Matrix::zeros(t_len, p.config.emotions);
    let rows = (0..t_len)
        .map(|t| head_row(&p.head, p.config.head_order, fused.row(t), output.row_mut(t)))
        .collect();
    Ok((
        output.clone(),
        ForwardCache {
            config: p.config.clone(),
            visual: cv,
            audio: ca,
            fused,
            rows,
            output,
        },
    ))
}

/// Predicts `T × 15` emotion scores in (0, 1) from aligned visual and audio
/// feature rows.
pub fn model_forward(visual: &Matrix, audio: &Matrix, p: &ModelParams) -> Result<Matrix> {
    model_forward_cached(visual, audio, p).map(|(out, _)| out)
}

/// Output of [`model_backward`].
#[derive(Debug, Clone)]
pub struct ModelGradients {
    pub params: ModelParams,
    pub d_visual: Matrix,
    pub d_audio: Matrix,
}

/// Reverse-mode gradients of `Σ d_output ∘ model_forward(..)`.
pub fn model_backward(
    p: &ModelParams,
    cache: &ForwardCache,
    d_output: &Matrix,
) -> Result<ModelGradients> {
    if cache.config != p.config {
        return Err(Error::Internal("forward cache built with a different config".into()));
    }
    if d_output.shape() != cache.output.shape() {
        return Err(Error::Internal(format!(
            "output gradient {:?} does not match cached forward {:?}",
            d_output.shape(),
            cache.output.shape()
        )));
    }
    let mut g = ModelParams::zeros(&p.config);
    let t_len = cache.len();
    let mut d_fused = Matrix::zeros(t_len, p.config.fused_dim());
    for t in 0..t_len {
        let df = head_row_backward(
            &p.head,
            &mut g.head,
            p.config.head_order,
            cache.fused.row(t),
            &cache.rows[t],
            cache.output.row(t),
            d_output.row(t),
        );
        d_fused.row_mut(t).copy_from_slice(&df);
    }
    let hv2 = 2 * p.config.hidden_dim;
    let d_hv = Matrix::from_rows(&d_fused.row_iter().map(|r| &r[..hv2]).collect::<Vec<_>>())?;
    let d_ha = Matrix::from_rows(&d_fused.row_iter().map(|r| &r[hv2..]).collect::<Vec<_>>())?;
    let (gv, d_visual) = bigru_stack_backward(&p.visual, &cache.visual, &d_hv)?;
    let (ga, d_audio) = bigru_stack_backward(&p.audio, &cache.audio, &d_ha)?;
    g.visual = gv;
    g.audio = ga;
    Ok(ModelGradients {
        params: g,
        d_visual,
        d_audio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            visual_dim: 3,
            audio_dim: 2,
            hidden_dim: 2,
            emotions: EMOTIONS,
            init_seed: seed,
            head_order: HeadOrder::GateProjectGate,
        }
    }

    fn random_seq(t: usize, d: usize, seed: u64) -> Matrix {
        Matrix::uniform(t, d, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_params(&tiny_config(1)).unwrap();
        let b = init_params(&tiny_config(1)).unwrap();
        let c = init_params(&tiny_config(2)).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        assert_ne!(a.to_flat(), c.to_flat());
    }

    #[test]
    fn init_shapes_and_ranges() {
        let cfg = ModelConfig {
            visual_dim: 8,
            audio_dim: 3,
            hidden_dim: 4,
            ..tiny_config(0)
        };
        let p = init_params(&cfg).unwrap();
        let cell = &p.visual.layers[0].forward;
        assert_eq!(cell.w_z.shape(), (4, 8));
        assert_eq!(cell.u_z.shape(), (4, 4));
        assert_eq!(cell.b_z.shape(), (4, 1));
        assert_eq!(p.visual.layers[1].forward.w_z.shape(), (4, 8));
        assert_eq!(p.head.cg1_w.shape(), (16, 16));
        assert_eq!(p.head.proj_w.shape(), (15, 16));
        assert!(cell.b_z.data().iter().all(|&v| v == 0.0));
        let s = (6.0f64 / 12.0).sqrt();
        assert!(cell.w_z.data().iter().all(|v| v.abs() <= s));
        assert_eq!(p.to_flat().len(), cfg.param_count());
    }

    #[test]
    fn config_rejects_wrong_emotion_count() {
        let cfg = ModelConfig {
            emotions: 14,
            ..tiny_config(0)
        };
        assert!(init_params(&cfg).is_err());
    }

    #[test]
    fn gru_zero_params_keep_zero_state() {
        let p = GruCellParams::zeros(3, 2);
        let h = gru_cell_forward(&[0.3, -1.0, 2.0], &[0.0, 0.0], &p).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
    }

    #[test]
    fn gru_state_from_zero_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p = GruCellParams::init(4, 3, &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let h = gru_cell_forward(&x, &[0.0; 3], &p).unwrap();
            assert!(h.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn gru_matches_hand_transcript() {
        // 2-dim input and state; each gate evaluated by hand below.
        let m = |r: &[&[f64]]| Matrix::from_rows(r).unwrap();
        let c = |v: &[f64]| Matrix::column(v).unwrap();
        let p = GruCellParams {
            w_z: m(&[&[0.5, -0.2], &[0.1, 0.3]]),
            u_z: m(&[&[0.2, 0.0], &[-0.1, 0.4]]),
            b_z: c(&[0.1, -0.1]),
            w_r: m(&[&[-0.3, 0.2], &[0.4, 0.1]]),
            u_r: m(&[&[0.1, 0.2], &[0.0, -0.3]]),
            b_r: c(&[0.0, 0.2]),
            w_h: m(&[&[0.6, 0.1], &[-0.2, 0.5]]),
            u_h: m(&[&[0.3, -0.1], &[0.2, 0.2]]),
            b_h: c(&[-0.05, 0.05]),
        };
        let x = [1.0, -0.5];
        let hp = [0.2, -0.4];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        // z pre-activations
        let az0 = 0.5 * 1.0 + -0.2 * -0.5 + 0.2 * 0.2 + 0.0 * -0.4 + 0.1;
        let az1 = 0.1 * 1.0 + 0.3 * -0.5 + -0.1 * 0.2 + 0.4 * -0.4 - 0.1;
        let ar0 = -0.3 * 1.0 + 0.2 * -0.5 + 0.1 * 0.2 + 0.2 * -0.4 + 0.0;
        let ar1 = 0.4 * 1.0 + 0.1 * -0.5 + 0.0 * 0.2 + -0.3 * -0.4 + 0.2;
        let (z0, z1, r0, r1) = (sig(az0), sig(az1), sig(ar0), sig(ar1));
        let (rh0, rh1) = (r0 * 0.2, r1 * -0.4);
        let hc0 = (0.6 * 1.0 + 0.1 * -0.5 + 0.3 * rh0 + -0.1 * rh1 - 0.05).tanh();
        let hc1 = (-0.2 * 1.0 + 0.5 * -0.5 + 0.2 * rh0 + 0.2 * rh1 + 0.05).tanh();
        let want = [(1.0 - z0) * 0.2 + z0 * hc0, (1.0 - z1) * -0.4 + z1 * hc1];
        let got = gru_cell_forward(&x, &hp, &p).unwrap();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{g} vs {w}");
        }
    }

    #[test]
    fn gru_dimension_mismatch() {
        let p = GruCellParams::zeros(3, 2);
        assert!(matches!(
            gru_cell_forward(&[1.0, 2.0], &[0.0, 0.0], &p),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn stack_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = BiGruStackParams::init(3, 2, &mut rng);
        let x = random_seq(1, 3, 1);
        let out = bigru_stack_forward(&x, &p).unwrap();
        let l1 = [
            gru_cell_forward(x.row(0), &[0.0; 2], &p.layers[0].forward).unwrap(),
            gru_cell_forward(x.row(0), &[0.0; 2], &p.layers[0].backward).unwrap(),
        ]
        .concat();
        let l2 = [
            gru_cell_forward(&l1, &[0.0; 2], &p.layers[1].forward).unwrap(),
            gru_cell_forward(&l1, &[0.0; 2], &p.layers[1].backward).unwrap(),
        ]
        .concat();
        assert_eq!(out.row(0), &l2[..]);
    }

    #[test]
    fn stack_rejects_empty_sequence() {
        let p = BiGruStackParams::zeros(3, 2);
        assert!(matches!(
            bigru_stack_forward(&Matrix::zeros(0, 3), &p),
            Err(Error::Input(_))
        ));
    }

    fn reversed_rows(m: &Matrix) -> Matrix {
        m.select_rows((0..m.rows()).rev())
    }

    fn swap_halves(m: &Matrix) -> Matrix {
        let h = m.cols() / 2;
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| [&r[h..], &r[..h]].concat()).collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_layer_time_reversal_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = BiGruLayerParams::init(3, 4, &mut rng);
        let swapped = BiGruLayerParams {
            forward: layer.backward.clone(),
            backward: layer.forward.clone(),
        };
        let x = random_seq(7, 3, 2);
        let (a, _) = layer_forward(&layer, &x).unwrap();
        let (b, _) = layer_forward(&swapped, &reversed_rows(&x)).unwrap();
        assert_eq!(reversed_rows(&swap_halves(&b)), a);
    }

    #[test]
    fn stack_time_reversal() {
        // Layer 2 sees its input halves swapped, so its input weight columns
        // are swapped along with the directions. Column permutation reorders
        // the dot-product sums, hence the tolerance.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = BiGruStackParams::init(3, 4, &mut rng);
        let swap_cols = |c: &GruCellParams| {
            let mut c = c.clone();
            c.w_z = swap_halves(&c.w_z);
            c.w_r = swap_halves(&c.w_r);
            c.w_h = swap_halves(&c.w_h);
            c
        };
        let q = BiGruStackParams {
            layers: [
                BiGruLayerParams {
                    forward: p.layers[0].backward.clone(),
                    backward: p.layers[0].forward.clone(),
                },
                BiGruLayerParams {
                    forward: swap_cols(&p.layers[1].backward),
                    backward: swap_cols(&p.layers[1].forward),
                },
            ],
        };
        let x = random_seq(6, 3, 4);
        let a = bigru_stack_forward(&x, &p).unwrap();
        let b = reversed_rows(&swap_halves(&bigru_stack_forward(&reversed_rows(&x), &q).unwrap()));
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn context_gate_examples() {
        let w0 = Matrix::zeros(2, 2);
        let b0 = Matrix::zeros(2, 1);
        assert_eq!(context_gate(&[1.0, -4.0], &w0, &b0).unwrap(), vec![0.5, -2.0]);
        let b30 = Matrix::filled(2, 1, 30.0);
        let y = context_gate(&[1.0, -4.0], &w0, &b30).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-9 && (y[1] + 4.0).abs() < 1e-9);
        let y = context_gate(&[1.0, -2.0], &Matrix::identity(2), &b0).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        assert!((y[0] - sig(1.0)).abs() < 1e-15);
        assert!((y[1] - sig(-2.0) * -2.0).abs() < 1e-15);
        assert!(context_gate(&[1.0], &w0, &b0).is_err());
    }

    #[test]
    fn zero_head_gives_constant_half() {
        for order in [HeadOrder::GateProjectGate, HeadOrder::ProjectSigmoidGate] {
            let cfg = ModelConfig {
                head_order: order,
                ..tiny_config(3)
            };
            let mut p = init_params(&cfg).unwrap();
            p.head = FusionHeadParams::zeros(cfg.fused_dim(), EMOTIONS);
            let out = model_forward(&random_seq(4, 3, 1), &random_seq(4, 2, 2), &p).unwrap();
            // project → sigmoid → gate gives σ(0)·σ(0) = 0.25 for the alternative order
            let want = if order == HeadOrder::GateProjectGate { 0.5 } else { 0.25 };
            assert!(out.data().iter().all(|&v| v == want));
        }
    }

    #[test]
    fn model_rejects_misaligned_modalities() {
        let p = init_params(&tiny_config(0)).unwrap();
        let err = model_forward(&random_seq(4, 3, 1), &random_seq(5, 2, 2), &p).unwrap_err();
        assert!(matches!(err, Error::Alignment { visual: 4, audio: 5 }));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let p = init_params(&tiny_config(4)).unwrap();
        let (out, cache) = model_forward_cached(&random_seq(4, 3, 1), &random_seq(4, 2, 2), &p).unwrap();
        let g = model_backward(&p, &cache, &Matrix::zeros(out.rows(), out.cols())).unwrap();
        assert!(g.params.to_flat().iter().all(|&v| v == 0.0));
        assert!(g.d_visual.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_are_linear_in_cotangent() {
        let p = init_params(&tiny_config(4)).unwrap();
        let (out, cache) = model_forward_cached(&random_seq(4, 3, 1), &random_seq(4, 2, 2), &p).unwrap();
        let d = Matrix::uniform(out.rows(), out.cols(), 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let g1 = model_backward(&p, &cache, &d).unwrap().params.to_flat();
        let g2 = model_backward(&p, &cache, &d.scale(2.0)).unwrap().params.to_flat();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let p = init_params(&tiny_config(4)).unwrap();
        let (_, cache) = model_forward_cached(&random_seq(4, 3, 1), &random_seq(4, 2, 2), &p).unwrap();
        assert!(matches!(
            model_backward(&p, &cache, &Matrix::zeros(5, EMOTIONS)),
            Err(Error::Internal(_))
        ));
        let other = init_params(&ModelConfig { hidden_dim: 3, ..tiny_config(4) }).unwrap();
        assert!(matches!(
            model_backward(&other, &cache, &Matrix::zeros(4, EMOTIONS)),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn flat_round_trip() {
        let p = init_params(&tiny_config(6)).unwrap();
        let q = ModelParams::from_flat(&p.config, &p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert!(ModelParams::from_flat(&p.config, &p.to_flat()[1..]).is_err());
    }
}

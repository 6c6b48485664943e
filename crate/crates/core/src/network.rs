//! Embedding → dense → LSTM → single linear output, with exact backpropagation
//! through time.
//!
//! Each step concatenates one embedding row per discrete marker with the
//! normalized continuous channels, passes it through a `tanh` dense layer and
//! one LSTM cell, and reads out `o_j = v·h_j + b`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SequenceInput;

const INIT_SCALE: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    /// Declared cardinality per discrete marker; tables get one extra unknown row.
    pub cardinalities: Vec<usize>,
    pub embedding_dims: Vec<usize>,
    pub n_continuous: usize,
    pub fused: usize,
    pub hidden: usize,
}

impl NetworkShape {
    pub fn input_width(&self) -> usize {
        self.embedding_dims.iter().sum::<usize>() + self.n_continuous
    }

    pub fn validate(&self) -> Result<()> {
        if self.cardinalities.len() != self.embedding_dims.len() {
            return Err(Error::Config(format!(
                "{} discrete markers but {} embedding widths",
                self.cardinalities.len(),
                self.embedding_dims.len()
            )));
        }
        if self.fused == 0 || self.hidden == 0 || self.embedding_dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// All trainable tensors. Gradients and optimizer moments reuse this type.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub shape: NetworkShape,
    /// `(cardinality + 1) × dim` per discrete marker.
    pub embeddings: Vec<DMatrix<f64>>,
    /// `fused × input_width`.
    pub dense_w: DMatrix<f64>,
    pub dense_b: DVector<f64>,
    /// `4H × (fused + H)`, gate blocks ordered input, forget, candidate, output.
    pub lstm_w: DMatrix<f64>,
    pub lstm_b: DVector<f64>,
    pub head_v: DVector<f64>,
    pub head_b: DVector<f64>,
}

impl NetworkParams {
    pub fn zeros(shape: &NetworkShape) -> Self {
        let h = shape.hidden;
        NetworkParams {
            shape: shape.clone(),
            embeddings: shape
                .cardinalities
                .iter()
                .zip(&shape.embedding_dims)
                .map(|(&c, &d)| DMatrix::zeros(c + 1, d))
                .collect(),
            dense_w: DMatrix::zeros(shape.fused, shape.input_width()),
            dense_b: DVector::zeros(shape.fused),
            lstm_w: DMatrix::zeros(4 * h, shape.fused + h),
            lstm_b: DVector::zeros(4 * h),
            head_v: DVector::zeros(h),
            head_b: DVector::zeros(1),
        }
    }

    /// Uniform(−0.08, 0.08) weights, forget-gate bias 1, unit-norm embedding rows.
    pub fn init<R: Rng>(shape: &NetworkShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let mut p = NetworkParams::zeros(shape);
        for t in p.tensors_mut() {
            for x in t.iter_mut() {
                *x = rng.random_range(-INIT_SCALE..INIT_SCALE);
            }
        }
        let h = shape.hidden;
        for k in h..2 * h {
            p.lstm_b[k] = 1.0;
        }
        for table in &mut p.embeddings {
            for x in table.iter_mut() {
                *x = rng.random_range(-1.0..1.0);
            }
        }
        p.normalize_embeddings();
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        NetworkParams::zeros(&self.shape)
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.embeddings.len())
            .map(|k| format!("embedding.{k}"))
            .collect();
        names.extend(
            ["dense.w", "dense.b", "lstm.w", "lstm.b", "head.v", "head.b"]
                .iter()
                .map(|s| s.to_string()),
        );
        names
    }

    /// `(rows, cols)` per tensor, in [`tensor_names`](Self::tensor_names) order.
    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes: Vec<(usize, usize)> =
            self.embeddings.iter().map(|t| t.shape()).collect();
        shapes.push(self.dense_w.shape());
        shapes.push(self.dense_b.shape());
        shapes.push(self.lstm_w.shape());
        shapes.push(self.lstm_b.shape());
        shapes.push(self.head_v.shape());
        shapes.push(self.head_b.shape());
        shapes
    }

    /// Column-major storage of each tensor.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.embeddings.iter().map(|t| t.as_slice()).collect();
        out.push(self.dense_w.as_slice());
        out.push(self.dense_b.as_slice());
        out.push(self.lstm_w.as_slice());
        out.push(self.lstm_b.as_slice());
        out.push(self.head_v.as_slice());
        out.push(self.head_b.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self
            .embeddings
            .iter_mut()
            .map(|t| t.as_mut_slice())
            .collect();
        out.push(self.dense_w.as_mut_slice());
        out.push(self.dense_b.as_mut_slice());
        out.push(self.lstm_w.as_mut_slice());
        out.push(self.lstm_b.as_mut_slice());
        out.push(self.head_v.as_mut_slice());
        out.push(self.head_b.as_mut_slice());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &NetworkParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// Euclidean norm over every coordinate, robust to huge magnitudes.
    pub fn global_norm(&self) -> f64 {
        let largest = self
            .tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()));
        if largest == 0.0 || !largest.is_finite() {
            return largest;
        }
        let sum: f64 = self
            .tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| (x / largest).powi(2))
            .sum();
        largest * sum.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Rescales every embedding row to unit Euclidean norm.
    pub fn normalize_embeddings(&mut self) {
        for table in &mut self.embeddings {
            for mut row in table.row_iter_mut() {
                let n = row.norm();
                if n > 0.0 {
                    row /= n;
                } else {
                    row[0] = 1.0;
                }
            }
        }
    }

    fn same_layout(&self, other: &NetworkParams) -> bool {
        self.shape == other.shape && self.tensor_shapes() == other.tensor_shapes()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
struct StepCache {
    x: DVector<f64>,
    z: DVector<f64>,
    input_gate: DVector<f64>,
    forget_gate: DVector<f64>,
    candidate: DVector<f64>,
    output_gate: DVector<f64>,
    cell: DVector<f64>,
    tanh_cell: DVector<f64>,
}

/// Intermediates retained for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    shape: NetworkShape,
    discrete: Vec<u32>,
    steps: Vec<StepCache>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `o_j` for every step.
    pub outputs: Vec<f64>,
    /// `h_j` for every step.
    pub hidden: Vec<DVector<f64>>,
    pub cache: ForwardCache,
}

pub fn forward(params: &NetworkParams, input: &SequenceInput) -> Result<ForwardPass> {
    let shape = &params.shape;
    let steps = input.len();
    if steps == 0 {
        return Err(Error::InvalidInput("sequence has no steps".into()));
    }
    if input.n_discrete != shape.cardinalities.len() || input.n_continuous != shape.n_continuous {
        return Err(Error::Mismatch(format!(
            "sequence has {} discrete / {} continuous channels, network expects {} / {}",
            input.n_discrete,
            input.n_continuous,
            shape.cardinalities.len(),
            shape.n_continuous
        )));
    }
    let h_dim = shape.hidden;
    let mut h = DVector::zeros(h_dim);
    let mut c = DVector::zeros(h_dim);
    let mut outputs = Vec::with_capacity(steps);
    let mut hidden = Vec::with_capacity(steps);
    let mut cache = Vec::with_capacity(steps);
    let mut joint = DVector::zeros(shape.fused + h_dim);

    for j in 0..steps {
        let mut x = DVector::zeros(shape.input_width());
        let mut offset = 0;
        for (k, &ix) in input.step_discrete(j).iter().enumerate() {
            let table = &params.embeddings[k];
            if ix as usize >= table.nrows() {
                return Err(Error::Mismatch(format!(
                    "step {j}: index {ix} outside embedding table {k} with {} rows",
                    table.nrows()
                )));
            }
            let dim = table.ncols();
            for d in 0..dim {
                x[offset + d] = table[(ix as usize, d)];
            }
            offset += dim;
        }
        for (d, v) in input.step_continuous(j).iter().enumerate() {
            x[offset + d] = *v;
        }

        let mut z = &params.dense_w * &x + &params.dense_b;
        z.apply(|v| *v = v.tanh());

        joint.rows_mut(0, shape.fused).copy_from(&z);
        joint.rows_mut(shape.fused, h_dim).copy_from(&h);
        let a = &params.lstm_w * &joint + &params.lstm_b;
        let input_gate = a.rows(0, h_dim).map(sigmoid);
        let forget_gate = a.rows(h_dim, h_dim).map(sigmoid);
        let candidate = a.rows(2 * h_dim, h_dim).map(f64::tanh);
        let output_gate = a.rows(3 * h_dim, h_dim).map(sigmoid);

        c = forget_gate.component_mul(&c) + input_gate.component_mul(&candidate);
        let tanh_cell = c.map(f64::tanh);
        h = output_gate.component_mul(&tanh_cell);
        let o = params.head_v.dot(&h) + params.head_b[0];
        if !o.is_finite() {
            return Err(Error::Numerical(format!("non-finite output at step {j}")));
        }
        outputs.push(o);
        hidden.push(h.clone());
        cache.push(StepCache {
            x,
            z,
            input_gate,
            forget_gate,
            candidate,
            output_gate,
            cell: c.clone(),
            tanh_cell,
        });
    }
    Ok(ForwardPass {
        outputs,
        hidden,
        cache: ForwardCache {
            shape: shape.clone(),
            discrete: input.discrete.clone(),
            steps: cache,
        },
    })
}

/// Gradients of `Σ_j grad_o[j] · o_j` with respect to every parameter.
pub fn backward(
    params: &NetworkParams,
    pass: &ForwardPass,
    grad_o: &[f64],
) -> Result<NetworkParams> {
    let mut grads = params.zeros_like();
    backward_into(params, pass, grad_o, &mut grads)?;
    Ok(grads)
}

/// As [`backward`], accumulating into `grads`.
pub fn backward_into(
    params: &NetworkParams,
    pass: &ForwardPass,
    grad_o: &[f64],
    grads: &mut NetworkParams,
) -> Result<()> {
    let cache = &pass.cache;
    let shape = &params.shape;
    if cache.shape != *shape || !grads.same_layout(params) {
        return Err(Error::Mismatch(
            "forward cache or gradient buffer was built for a different network".into(),
        ));
    }
    let steps = cache.steps.len();
    if grad_o.len() != steps || pass.hidden.len() != steps {
        return Err(Error::Mismatch(format!(
            "{} output gradients for a {steps}-step forward pass",
            grad_o.len()
        )));
    }
    let h_dim = shape.hidden;
    let fused = shape.fused;
    let n_discrete = shape.cardinalities.len();
    let mut dh_next = DVector::<f64>::zeros(h_dim);
    let mut dc_next = DVector::<f64>::zeros(h_dim);
    let mut joint = DVector::<f64>::zeros(fused + h_dim);
    let mut gate_grad = DVector::<f64>::zeros(4 * h_dim);
    let zero_state = DVector::<f64>::zeros(h_dim);

    for j in (0..steps).rev() {
        let st = &cache.steps[j];
        let h = &pass.hidden[j];
        let (h_prev, c_prev) = if j > 0 {
            (&pass.hidden[j - 1], &cache.steps[j - 1].cell)
        } else {
            (&zero_state, &zero_state)
        };
        let g_o = grad_o[j];
        grads.head_v.axpy(g_o, h, 1.0);
        grads.head_b[0] += g_o;

        let dh = &params.head_v * g_o + &dh_next;
        let mut dc = dc_next.clone();
        for k in 0..h_dim {
            let o = st.output_gate[k];
            let tc = st.tanh_cell[k];
            dc[k] += dh[k] * o * (1.0 - tc * tc);
            let i = st.input_gate[k];
            let f = st.forget_gate[k];
            let g = st.candidate[k];
            gate_grad[k] = dc[k] * g * i * (1.0 - i);
            gate_grad[h_dim + k] = dc[k] * c_prev[k] * f * (1.0 - f);
            gate_grad[2 * h_dim + k] = dc[k] * i * (1.0 - g * g);
            gate_grad[3 * h_dim + k] = dh[k] * tc * o * (1.0 - o);
            dc_next[k] = dc[k] * f;
        }

        joint.rows_mut(0, fused).copy_from(&st.z);
        joint.rows_mut(fused, h_dim).copy_from(h_prev);
        grads.lstm_w.ger(1.0, &gate_grad, &joint, 1.0);
        grads.lstm_b += &gate_grad;
        let d_joint = params.lstm_w.tr_mul(&gate_grad);
        dh_next.copy_from(&d_joint.rows(fused, h_dim));

        let mut dz_pre = d_joint.rows(0, fused).into_owned();
        for k in 0..fused {
            dz_pre[k] *= 1.0 - st.z[k] * st.z[k];
        }
        grads.dense_w.ger(1.0, &dz_pre, &st.x, 1.0);
        grads.dense_b += &dz_pre;
        let dx = params.dense_w.tr_mul(&dz_pre);

        let mut offset = 0;
        for k in 0..n_discrete {
            let ix = cache.discrete[j * n_discrete + k] as usize;
            let table = &mut grads.embeddings[k];
            let dim = table.ncols();
            for d in 0..dim {
                table[(ix, d)] += dx[offset + d];
            }
            offset += dim;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Gradients with a larger global norm are rescaled to this norm.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: NetworkParams,
    pub second_moment: NetworkParams,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        AdamState {
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }
}

/// One clipped Adam step followed by projecting every embedding row back to
/// unit norm.
pub fn apply_update_with_norm_projection(
    params: &mut NetworkParams,
    grads: &NetworkParams,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if !params.same_layout(grads)
        || !params.same_layout(&state.first_moment)
        || !params.same_layout(&state.second_moment)
    {
        return Err(Error::Mismatch(
            "gradient or optimizer state shapes differ from the parameters".into(),
        ));
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::Numerical("gradient norm is not finite".into()));
    }
    let clip = if norm > config.clip_norm {
        config.clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    let grad_tensors = grads.tensors();
    let m_tensors = state.first_moment.tensors_mut();
    let v_tensors = state.second_moment.tensors_mut();
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grad_tensors)
        .zip(m_tensors)
        .zip(v_tensors)
    {
        for k in 0..p.len() {
            let gk = g[k] * clip;
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * gk;
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * gk * gk;
            let m_hat = m[k] / bias1;
            let v_hat = v[k] / bias2;
            p[k] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    params.normalize_embeddings();
    Ok(())
}

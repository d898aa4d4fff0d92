//! Gated recurrent cell: forward step and backpropagation through time.
//!
//! Per step, with `σ` the logistic function:
//!
//! ```text
//! r  = σ(W_rx·x + W_rh·h_prev + b_r)
//! z  = σ(W_zx·x + W_zh·h_prev + b_z)
//! h̃  = tanh(W_hx·x + W_hh·(r ⊙ h_prev) [+ b_h])
//! h  = (1 − z) ⊙ h_prev + z ⊙ h̃
//! y  = σ(W_o·h)
//! ```

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::Rng;

use super::GgnnError;

/// Weights of the cell. The same layout doubles as a gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct GruModel {
    pub w_rx: Array2<f64>,
    pub w_rh: Array2<f64>,
    pub b_r: Array1<f64>,
    pub w_zx: Array2<f64>,
    pub w_zh: Array2<f64>,
    pub b_z: Array1<f64>,
    pub w_hx: Array2<f64>,
    pub w_hh: Array2<f64>,
    /// Candidate bias; absent unless explicitly enabled.
    pub b_h: Option<Array1<f64>>,
    pub w_o: Array2<f64>,
}

/// Gradients of the loss with respect to each [`GruModel`] parameter.
pub type Gradients = GruModel;

/// Parameter names in the canonical order used by [`GruModel::parameters`].
pub const PARAMETER_NAMES: [&str; 10] = ["w_rx", "w_rh", "b_r", "w_zx", "w_zh", "b_z", "w_hx", "w_hh", "b_h", "w_o"];

impl GruModel {
    pub fn zeros(input_dim: usize, hidden_dim: usize, candidate_bias: bool) -> Self {
        let (dx, dh) = (input_dim, hidden_dim);
        GruModel {
            w_rx: Array2::zeros((dh, dx)),
            w_rh: Array2::zeros((dh, dh)),
            b_r: Array1::zeros(dh),
            w_zx: Array2::zeros((dh, dx)),
            w_zh: Array2::zeros((dh, dh)),
            b_z: Array1::zeros(dh),
            w_hx: Array2::zeros((dh, dx)),
            w_hh: Array2::zeros((dh, dh)),
            b_h: candidate_bias.then(|| Array1::zeros(dh)),
            w_o: Array2::zeros((dx, dh)),
        }
    }

    /// Weight matrices uniform in `±init_scale`; biases start at zero.
    pub fn random<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, init_scale: f64, candidate_bias: bool, rng: &mut R) -> Self {
        let mut m = Self::zeros(input_dim, hidden_dim, candidate_bias);
        for (name, values) in m.parameters_mut() {
            if name.starts_with("w_") {
                for v in values {
                    *v = rng.random_range(-init_scale..=init_scale);
                }
            }
        }
        m
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim(), self.b_h.is_some())
    }

    pub fn input_dim(&self) -> usize {
        self.w_rx.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_rx.nrows()
    }

    /// `(name, values)` for every parameter, row-major, in
    /// [`PARAMETER_NAMES`] order (`b_h` only when present).
    pub fn parameters(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = vec![
            ("w_rx", slice(&self.w_rx)),
            ("w_rh", slice(&self.w_rh)),
            ("b_r", self.b_r.as_slice().expect("contiguous")),
            ("w_zx", slice(&self.w_zx)),
            ("w_zh", slice(&self.w_zh)),
            ("b_z", self.b_z.as_slice().expect("contiguous")),
            ("w_hx", slice(&self.w_hx)),
            ("w_hh", slice(&self.w_hh)),
        ];
        if let Some(b) = &self.b_h {
            out.push(("b_h", b.as_slice().expect("contiguous")));
        }
        out.push(("w_o", slice(&self.w_o)));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = vec![
            ("w_rx", slice_mut(&mut self.w_rx)),
            ("w_rh", slice_mut(&mut self.w_rh)),
            ("b_r", self.b_r.as_slice_mut().expect("contiguous")),
            ("w_zx", slice_mut(&mut self.w_zx)),
            ("w_zh", slice_mut(&mut self.w_zh)),
            ("b_z", self.b_z.as_slice_mut().expect("contiguous")),
            ("w_hx", slice_mut(&mut self.w_hx)),
            ("w_hh", slice_mut(&mut self.w_hh)),
        ];
        if let Some(b) = &mut self.b_h {
            out.push(("b_h", b.as_slice_mut().expect("contiguous")));
        }
        out.push(("w_o", slice_mut(&mut self.w_o)));
        out
    }

    /// Checks shape consistency and finiteness of every parameter.
    pub fn validate(&self) -> Result<(), GgnnError> {
        let (dx, dh) = (self.input_dim(), self.hidden_dim());
        let shape_err = |name: &str, got: &[usize], want: &[usize]| {
            GgnnError::Shape(format!("{name} has shape {got:?}, expected {want:?}"))
        };
        for (name, m, want) in [
            ("w_rx", &self.w_rx, [dh, dx]),
            ("w_zx", &self.w_zx, [dh, dx]),
            ("w_hx", &self.w_hx, [dh, dx]),
            ("w_rh", &self.w_rh, [dh, dh]),
            ("w_zh", &self.w_zh, [dh, dh]),
            ("w_hh", &self.w_hh, [dh, dh]),
            ("w_o", &self.w_o, [dx, dh]),
        ] {
            if m.shape() != want {
                return Err(shape_err(name, m.shape(), &want));
            }
        }
        let biases = [("b_r", Some(&self.b_r)), ("b_z", Some(&self.b_z)), ("b_h", self.b_h.as_ref())];
        for (name, b) in biases {
            if let Some(b) = b {
                if b.len() != dh {
                    return Err(shape_err(name, b.shape(), &[dh]));
                }
            }
        }
        if dx == 0 || dh == 0 {
            return Err(GgnnError::Shape(format!("empty model ({dx} inputs, {dh} hidden units)")));
        }
        for (name, values) in self.parameters() {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(GgnnError::NonFiniteModel(name.to_string()));
            }
        }
        Ok(())
    }

    /// Euclidean norm over all parameters.
    pub fn norm(&self) -> f64 {
        self.parameters().iter().flat_map(|(_, v)| v.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += scale · other`, parameter by parameter.
    pub fn add_scaled(&mut self, scale: f64, other: &GruModel) {
        for ((_, a), (_, b)) in self.parameters_mut().into_iter().zip(other.parameters()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

fn slice(m: &Array2<f64>) -> &[f64] {
    m.as_slice().expect("parameters are stored row-major")
}

fn slice_mut(m: &mut Array2<f64>) -> &mut [f64] {
    m.as_slice_mut().expect("parameters are stored row-major")
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Activations of one forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub r: Array1<f64>,
    pub z: Array1<f64>,
    pub h_candidate: Array1<f64>,
    pub h: Array1<f64>,
    pub y: Array1<f64>,
}

/// One forward step of the cell.
pub fn gru_step_forward(x: ArrayView1<f64>, h_prev: ArrayView1<f64>, model: &GruModel) -> Result<StepState, GgnnError> {
    if x.len() != model.input_dim() {
        return Err(GgnnError::Shape(format!("input has {} entries, model expects {}", x.len(), model.input_dim())));
    }
    if h_prev.len() != model.hidden_dim() {
        return Err(GgnnError::Shape(format!("hidden state has {} entries, model expects {}", h_prev.len(), model.hidden_dim())));
    }
    if h_prev.iter().any(|v| !v.is_finite()) {
        return Err(GgnnError::Shape("hidden state is not finite".into()));
    }
    Ok(step(x, h_prev, model))
}

fn step(x: ArrayView1<f64>, h_prev: ArrayView1<f64>, model: &GruModel) -> StepState {
    let r = (model.w_rx.dot(&x) + model.w_rh.dot(&h_prev) + &model.b_r).mapv_into(sigmoid);
    let z = (model.w_zx.dot(&x) + model.w_zh.dot(&h_prev) + &model.b_z).mapv_into(sigmoid);
    let mut pre = model.w_hx.dot(&x) + model.w_hh.dot(&(&r * &h_prev));
    if let Some(b) = &model.b_h {
        pre += b;
    }
    let h_candidate = pre.mapv_into(f64::tanh);
    let h = Zip::from(&z).and(&h_prev).and(&h_candidate).map_collect(|&z, &hp, &hc| (1.0 - z) * hp + z * hc);
    let y = model.w_o.dot(&h).mapv_into(sigmoid);
    StepState { r, z, h_candidate, h, y }
}

/// Runs the cell over `inputs` from a zero hidden state. Non-finite
/// values propagate instead of failing here.
pub fn gru_forward(inputs: &[Array1<f64>], model: &GruModel) -> Result<Vec<StepState>, GgnnError> {
    if let Some(t) = inputs.iter().position(|x| x.len() != model.input_dim()) {
        return Err(GgnnError::Shape(format!("input {t} has {} entries, model expects {}", inputs[t].len(), model.input_dim())));
    }
    let mut h = Array1::zeros(model.hidden_dim());
    let mut states = Vec::with_capacity(inputs.len());
    for x in inputs {
        let s = step(x.view(), h.view(), model);
        h.assign(&s.h);
        states.push(s);
    }
    Ok(states)
}

/// Result of one forward/backward sweep over a sequence.
#[derive(Debug, Clone)]
pub struct BackwardPass {
    /// `L = ½ Σ_t w_t ‖y_d,t − y_t‖²`.
    pub loss: f64,
    /// `∂L/∂θ` for every parameter; descend along the negative.
    pub gradients: Gradients,
    /// `∂L/∂h_t` per step, including the contribution carried back from `t+1`.
    pub hidden_deltas: Vec<Array1<f64>>,
    pub outputs: Vec<Array1<f64>>,
}

/// Backpropagation through time with unit step weights.
pub fn gru_backward_gradients(inputs: &[Array1<f64>], targets: &[Array1<f64>], model: &GruModel) -> Result<BackwardPass, GgnnError> {
    gru_backward_weighted(inputs, targets, &vec![1.0; inputs.len()], model)
}

fn add_outer(m: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    Zip::from(m.rows_mut()).and(a).for_each(|mut row, &ai| {
        if ai != 0.0 {
            row.scaled_add(ai, b);
        }
    });
}

/// Backpropagation through time where step `t` contributes `weights[t]`
/// times its squared error to the loss (0 masks a step out).
///
/// Deltas beyond the last step are zero. A NaN in any delta aborts with
/// the index of the step where it appeared.
pub fn gru_backward_weighted(
    inputs: &[Array1<f64>],
    targets: &[Array1<f64>],
    weights: &[f64],
    model: &GruModel,
) -> Result<BackwardPass, GgnnError> {
    if inputs.is_empty() {
        return Err(GgnnError::EmptySequence);
    }
    if targets.len() != inputs.len() || weights.len() != inputs.len() {
        return Err(GgnnError::Shape(format!(
            "{} inputs, {} targets, {} weights",
            inputs.len(),
            targets.len(),
            weights.len()
        )));
    }
    if let Some(t) = targets.iter().position(|y| y.len() != model.input_dim()) {
        return Err(GgnnError::Shape(format!("target {t} has {} entries, model outputs {}", targets[t].len(), model.input_dim())));
    }
    let states = gru_forward(inputs, model)?;
    let dh_dim = model.hidden_dim();
    let zero = Array1::zeros(dh_dim);
    let mut grads = model.zeros_like();
    let mut hidden_deltas = vec![Array1::zeros(dh_dim); inputs.len()];
    let mut loss = 0.0;
    let mut dh_next: Array1<f64> = Array1::zeros(dh_dim);

    for t in (0..inputs.len()).rev() {
        let s = &states[t];
        let h_prev = if t == 0 { &zero } else { &states[t - 1].h };
        let x = &inputs[t];
        let wt = weights[t];

        let err = &s.y - &targets[t];
        loss += 0.5 * wt * err.dot(&err);
        let d_y = Zip::from(&err).and(&s.y).map_collect(|&e, &y| wt * e * y * (1.0 - y));
        add_outer(&mut grads.w_o, &d_y, &s.h);

        let dh = model.w_o.t().dot(&d_y) + &dh_next;
        let d_z = Zip::from(&dh)
            .and(&s.h_candidate)
            .and(h_prev)
            .and(&s.z)
            .map_collect(|&d, &hc, &hp, &z| d * (hc - hp) * z * (1.0 - z));
        let d_cand = Zip::from(&dh).and(&s.z).and(&s.h_candidate).map_collect(|&d, &z, &hc| d * z * (1.0 - hc * hc));
        let gated = &s.r * h_prev;
        add_outer(&mut grads.w_hx, &d_cand, x);
        add_outer(&mut grads.w_hh, &d_cand, &gated);
        if let Some(b) = &mut grads.b_h {
            *b += &d_cand;
        }
        let d_gated = model.w_hh.t().dot(&d_cand);
        let d_r = Zip::from(&d_gated).and(h_prev).and(&s.r).map_collect(|&d, &hp, &r| d * hp * r * (1.0 - r));

        add_outer(&mut grads.w_zx, &d_z, x);
        add_outer(&mut grads.w_zh, &d_z, h_prev);
        grads.b_z += &d_z;
        add_outer(&mut grads.w_rx, &d_r, x);
        add_outer(&mut grads.w_rh, &d_r, h_prev);
        grads.b_r += &d_r;

        let mut dh_prev = Zip::from(&dh).and(&s.z).and(&d_gated).and(&s.r).map_collect(|&d, &z, &dg, &r| d * (1.0 - z) + dg * r);
        dh_prev += &model.w_zh.t().dot(&d_z);
        dh_prev += &model.w_rh.t().dot(&d_r);

        let finite = |a: &Array1<f64>| a.iter().all(|v| !v.is_nan());
        if !(finite(&d_y) && finite(&dh) && finite(&d_z) && finite(&d_r) && finite(&d_cand)) {
            return Err(GgnnError::Numerical { step: t });
        }
        hidden_deltas[t] = dh;
        dh_next = dh_prev;
    }
    Ok(BackwardPass { loss, gradients: grads, hidden_deltas, outputs: states.into_iter().map(|s| s.y).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<Array1<f64>> {
        (0..t).map(|_| Array1::from_iter((0..d).map(|_| rng.random_range(0.0..1.0)))).collect()
    }

    /// Scalar-loop transcription of the step equations.
    fn scalar_step(x: &[f64], h: &[f64], m: &GruModel) -> (Vec<f64>, Vec<f64>) {
        let (dx, dh) = (m.input_dim(), m.hidden_dim());
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut r = vec![0.0; dh];
        let mut z = vec![0.0; dh];
        for i in 0..dh {
            let (mut ar, mut az) = (m.b_r[i], m.b_z[i]);
            for j in 0..dx {
                ar += m.w_rx[[i, j]] * x[j];
                az += m.w_zx[[i, j]] * x[j];
            }
            for j in 0..dh {
                ar += m.w_rh[[i, j]] * h[j];
                az += m.w_zh[[i, j]] * h[j];
            }
            r[i] = sig(ar);
            z[i] = sig(az);
        }
        let mut h_new = vec![0.0; dh];
        for i in 0..dh {
            let mut a = m.b_h.as_ref().map_or(0.0, |b| b[i]);
            for j in 0..dx {
                a += m.w_hx[[i, j]] * x[j];
            }
            for j in 0..dh {
                a += m.w_hh[[i, j]] * r[j] * h[j];
            }
            h_new[i] = (1.0 - z[i]) * h[i] + z[i] * a.tanh();
        }
        let mut y = vec![0.0; dx];
        for (k, yk) in y.iter_mut().enumerate() {
            let mut a = 0.0;
            for j in 0..dh {
                a += m.w_o[[k, j]] * h_new[j];
            }
            *yk = sig(a);
        }
        (h_new, y)
    }

    fn loss(inputs: &[Array1<f64>], targets: &[Array1<f64>], m: &GruModel) -> f64 {
        let mut h = vec![0.0; m.hidden_dim()];
        let mut l = 0.0;
        for (x, yd) in inputs.iter().zip(targets) {
            let (hn, y) = scalar_step(x.as_slice().unwrap(), &h, m);
            l += 0.5 * y.iter().zip(yd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            h = hn;
        }
        l
    }

    #[test]
    fn zero_model_step() {
        let m = GruModel::zeros(4, 3, false);
        let x = Array1::from(vec![0.3, -1.0, 2.0, 0.0]);
        let s = gru_step_forward(x.view(), Array1::zeros(3).view(), &m).unwrap();
        assert!(s.r.iter().chain(&s.z).all(|&v| v == 0.5));
        assert!(s.h_candidate.iter().chain(&s.h).all(|&v| v == 0.0));
        assert!(s.y.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn fixed_point_when_candidate_equals_previous() {
        // With W_hh = 0 and no input weights, h̃ = 0, so h_prev = 0 is fixed for any z.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = GruModel::random(4, 3, 0.5, false, &mut rng);
        m.w_hx.fill(0.0);
        m.w_hh.fill(0.0);
        let x = Array1::from(vec![0.1, 0.2, 0.3, 0.4]);
        let s = gru_step_forward(x.view(), Array1::zeros(3).view(), &m).unwrap();
        assert!(s.h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_scalar_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for bias in [false, true] {
            let mut m = GruModel::random(4, 3, 0.8, bias, &mut rng);
            for (_, v) in m.parameters_mut() {
                for e in v {
                    *e = rng.random_range(-0.8..0.8);
                }
            }
            let x = Array1::from_iter((0..4).map(|_| rng.random_range(0.0..1.0)));
            let h = Array1::from_iter((0..3).map(|_| rng.random_range(-0.9..0.9)));
            let s = gru_step_forward(x.view(), h.view(), &m).unwrap();
            let (h2, y2) = scalar_step(x.as_slice().unwrap(), h.as_slice().unwrap(), &m);
            for (a, b) in s.h.iter().zip(&h2).chain(s.y.iter().zip(&y2)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let m = GruModel::zeros(4, 3, false);
        assert!(matches!(gru_step_forward(Array1::zeros(5).view(), Array1::zeros(3).view(), &m), Err(GgnnError::Shape(_))));
        assert!(matches!(gru_step_forward(Array1::zeros(4).view(), Array1::zeros(2).view(), &m), Err(GgnnError::Shape(_))));
        assert!(matches!(gru_backward_gradients(&[], &[], &m), Err(GgnnError::EmptySequence)));
        let mut bad = m.clone();
        bad.w_o = Array2::zeros((3, 3));
        assert!(bad.validate().is_err());
        let mut nan = m.clone();
        nan.w_zh[[0, 0]] = f64::NAN;
        assert!(matches!(nan.validate(), Err(GgnnError::NonFiniteModel(n)) if n == "w_zh"));
    }

    #[test]
    fn nan_input_reports_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = GruModel::random(4, 3, 0.5, false, &mut rng);
        let mut xs = seq(&mut rng, 3, 4);
        let ys = seq(&mut rng, 3, 4);
        xs[2][1] = f64::NAN;
        assert!(matches!(gru_backward_gradients(&xs, &ys, &m), Err(GgnnError::Numerical { step: 2 })));
        xs[2][1] = 0.5;
        xs[0][0] = f64::NAN;
        // NaN at step 0 reaches every later step; the backward sweep sees it first at the end.
        assert!(matches!(gru_backward_gradients(&xs, &ys, &m), Err(GgnnError::Numerical { step: 2 })));
    }

    #[test]
    fn perfect_prediction_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = GruModel::random(4, 3, 0.5, true, &mut rng);
        let xs = seq(&mut rng, 4, 4);
        let ys: Vec<_> = gru_forward(&xs, &m).unwrap().into_iter().map(|s| s.y).collect();
        let pass = gru_backward_gradients(&xs, &ys, &m).unwrap();
        assert_eq!(pass.loss, 0.0);
        assert_eq!(pass.gradients.norm(), 0.0);
    }

    #[test]
    fn single_step_hidden_delta_is_output_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = GruModel::random(4, 3, 0.5, false, &mut rng);
        let xs = seq(&mut rng, 1, 4);
        let ys = seq(&mut rng, 1, 4);
        let pass = gru_backward_gradients(&xs, &ys, &m).unwrap();
        let y = &pass.outputs[0];
        let d_y = (y - &ys[0]) * y * &y.mapv(|v| 1.0 - v);
        let expect = m.w_o.t().dot(&d_y);
        for (a, b) in pass.hidden_deltas[0].iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut m = GruModel::random(4, 3, 0.9, seed % 2 == 1, &mut rng);
            if let Some(b) = &mut m.b_h {
                b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
            m.b_r.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            m.b_z.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            let xs = seq(&mut rng, 3, 4);
            let ys = seq(&mut rng, 3, 4);
            let pass = gru_backward_gradients(&xs, &ys, &m).unwrap();
            assert!((pass.loss - loss(&xs, &ys, &m)).abs() < 1e-12);
            let analytic = pass.gradients.parameters().into_iter().map(|(n, v)| (n, v.to_vec())).collect::<Vec<_>>();
            for (p, (name, grad)) in analytic.iter().enumerate() {
                for (k, &g) in grad.iter().enumerate() {
                    let eps = 1e-5;
                    let mut plus = m.clone();
                    plus.parameters_mut()[p].1[k] += eps;
                    let mut minus = m.clone();
                    minus.parameters_mut()[p].1[k] -= eps;
                    let fd = (loss(&xs, &ys, &plus) - loss(&xs, &ys, &minus)) / (2.0 * eps);
                    let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-7);
                    assert!(rel < 1e-4, "seed {seed} {name}[{k}]: analytic {g} vs fd {fd}");
                }
            }
        }
    }

    #[test]
    fn gates_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = GruModel::random(6, 5, 1.0, true, &mut rng);
        let xs = seq(&mut rng, 20, 6);
        for s in gru_forward(&xs, &m).unwrap() {
            assert!(s.r.iter().chain(&s.z).chain(&s.y).all(|&v| v > 0.0 && v < 1.0));
            assert!(s.h.iter().all(|&v| v > -1.0 && v < 1.0));
        }
        let again = gru_forward(&xs, &m).unwrap();
        assert_eq!(again, gru_forward(&xs, &m).unwrap());
    }
}

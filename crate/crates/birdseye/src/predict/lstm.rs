//! Single-layer LSTM with explicit forward caches and backpropagation
//! through time, on `f64` dense matrices.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::PredictError;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// LSTM weights. Stacked matrices hold the four gates in row blocks
/// `[input; forget; cell; output]`, each `hidden_size` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub input_size: usize,
    pub hidden_size: usize,
    /// Input weights, `4*hidden × input`.
    pub w: DMatrix<f64>,
    /// Recurrent weights, `4*hidden × hidden`.
    pub u: DMatrix<f64>,
    /// Gate biases, `4*hidden`.
    pub b: DVector<f64>,
}

/// Per-step activations retained for backpropagation.
#[derive(Debug, Clone)]
pub struct LstmCache {
    pub xs: Vec<DVector<f64>>,
    pub gate_i: Vec<DVector<f64>>,
    pub gate_f: Vec<DVector<f64>>,
    pub gate_g: Vec<DVector<f64>>,
    pub gate_o: Vec<DVector<f64>>,
    pub cell: Vec<DVector<f64>>,
    pub cell_tanh: Vec<DVector<f64>>,
    /// Hidden states, one per input step.
    pub hidden: Vec<DVector<f64>>,
}

/// Parameter gradients in the same shapes as [`LstmLayer`].
#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub dw: DMatrix<f64>,
    pub du: DMatrix<f64>,
    pub db: DVector<f64>,
}

impl LstmLayer {
    /// Zero-initialized layer.
    pub fn zeros(input_size: usize, hidden_size: usize) -> Result<Self, PredictError> {
        if input_size == 0 || hidden_size == 0 {
            return Err(PredictError::InvalidArgument(
                "layer sizes must be positive".into(),
            ));
        }
        Ok(Self {
            input_size,
            hidden_size,
            w: DMatrix::zeros(4 * hidden_size, input_size),
            u: DMatrix::zeros(4 * hidden_size, hidden_size),
            b: DVector::zeros(4 * hidden_size),
        })
    }

    /// Uniform init in ±1/√hidden, deterministic from the caller's RNG.
    pub fn init_uniform(
        input_size: usize,
        hidden_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, PredictError> {
        let mut layer = Self::zeros(input_size, hidden_size)?;
        let k = 1.0 / (hidden_size as f64).sqrt();
        for v in layer.w.iter_mut() {
            *v = rng.gen_range(-k..k);
        }
        for v in layer.u.iter_mut() {
            *v = rng.gen_range(-k..k);
        }
        for v in layer.b.iter_mut() {
            *v = rng.gen_range(-k..k);
        }
        Ok(layer)
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.u.len() + self.b.len()
    }

    /// Runs the sequence from zero initial hidden/cell state.
    pub fn forward(&self, xs: &[DVector<f64>]) -> Result<LstmCache, PredictError> {
        if xs.is_empty() {
            return Err(PredictError::InvalidArgument("empty sequence".into()));
        }
        let h = self.hidden_size;
        let mut cache = LstmCache {
            xs: xs.to_vec(),
            gate_i: Vec::with_capacity(xs.len()),
            gate_f: Vec::with_capacity(xs.len()),
            gate_g: Vec::with_capacity(xs.len()),
            gate_o: Vec::with_capacity(xs.len()),
            cell: Vec::with_capacity(xs.len()),
            cell_tanh: Vec::with_capacity(xs.len()),
            hidden: Vec::with_capacity(xs.len()),
        };
        let mut h_prev = DVector::zeros(h);
        let mut c_prev: DVector<f64> = DVector::zeros(h);
        for (t, x) in xs.iter().enumerate() {
            if x.len() != self.input_size {
                return Err(PredictError::InvalidArgument(format!(
                    "input {t} has dimension {}, expected {}",
                    x.len(),
                    self.input_size
                )));
            }
            let pre = &self.w * x + &self.u * &h_prev + &self.b;
            let gi = pre.rows(0, h).map(sigmoid);
            let gf = pre.rows(h, h).map(sigmoid);
            let gg = pre.rows(2 * h, h).map(f64::tanh);
            let go = pre.rows(3 * h, h).map(sigmoid);
            let c = gf.component_mul(&c_prev) + gi.component_mul(&gg);
            let ct = c.map(f64::tanh);
            let hv = go.component_mul(&ct);
            cache.gate_i.push(gi);
            cache.gate_f.push(gf);
            cache.gate_g.push(gg);
            cache.gate_o.push(go);
            cache.cell.push(c.clone());
            cache.cell_tanh.push(ct);
            cache.hidden.push(hv.clone());
            h_prev = hv;
            c_prev = c;
        }
        Ok(cache)
    }

    /// Backpropagation through time. `dh[t]` is ∂loss/∂hidden\[t\] from the
    /// heads; returns parameter gradients.
    pub fn backward(&self, cache: &LstmCache, dh: &[DVector<f64>]) -> LstmGrads {
        assert_eq!(dh.len(), cache.hidden.len());
        let h = self.hidden_size;
        let steps = cache.hidden.len();
        let mut grads = LstmGrads {
            dw: DMatrix::zeros(4 * h, self.input_size),
            du: DMatrix::zeros(4 * h, h),
            db: DVector::zeros(4 * h),
        };
        let mut dh_next = DVector::zeros(h);
        let mut dc_next = DVector::zeros(h);
        for t in (0..steps).rev() {
            let gi = &cache.gate_i[t];
            let gf = &cache.gate_f[t];
            let gg = &cache.gate_g[t];
            let go = &cache.gate_o[t];
            let ct = &cache.cell_tanh[t];
            let dh_t = &dh[t] + &dh_next;
            let dc = dh_t
                .component_mul(go)
                .component_mul(&ct.map(|v| 1.0 - v * v))
                + &dc_next;
            let dz_o = dh_t
                .component_mul(ct)
                .component_mul(&go.map(|v| v * (1.0 - v)));
            let dz_i = dc
                .component_mul(gg)
                .component_mul(&gi.map(|v| v * (1.0 - v)));
            let c_prev = if t == 0 {
                DVector::zeros(h)
            } else {
                cache.cell[t - 1].clone()
            };
            let dz_f = dc
                .component_mul(&c_prev)
                .component_mul(&gf.map(|v| v * (1.0 - v)));
            let dz_g = dc
                .component_mul(gi)
                .component_mul(&gg.map(|v| 1.0 - v * v));
            let mut dz = DVector::zeros(4 * h);
            dz.rows_mut(0, h).copy_from(&dz_i);
            dz.rows_mut(h, h).copy_from(&dz_f);
            dz.rows_mut(2 * h, h).copy_from(&dz_g);
            dz.rows_mut(3 * h, h).copy_from(&dz_o);
            grads.dw += &dz * cache.xs[t].transpose();
            if t > 0 {
                grads.du += &dz * cache.hidden[t - 1].transpose();
            }
            grads.db += &dz;
            dh_next = self.u.transpose() * &dz;
            dc_next = dc.component_mul(gf);
        }
        grads
    }
}

/// Softmax of a vector (shift-stabilized).
pub fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let m = z.max();
    let e = z.map(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_weights_give_zero_hidden_states() {
        let layer = LstmLayer::zeros(3, 4).unwrap();
        let xs = vec![DVector::zeros(3); 5];
        let cache = layer.forward(&xs).unwrap();
        for hv in &cache.hidden {
            assert!(hv.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn hand_evaluated_single_step() {
        // 1 input, 1 hidden unit, every weight and bias 0.5, x = [1]: all
        // four gate pre-activations are 0.5*1 + 0.5*0 + 0.5 = 1.0.
        let mut layer = LstmLayer::zeros(1, 1).unwrap();
        layer.w.fill(0.5);
        layer.u.fill(0.5);
        layer.b.fill(0.5);
        let cache = layer.forward(&[DVector::from_vec(vec![1.0])]).unwrap();
        let s1 = sigmoid(1.0);
        let g1 = 1f64.tanh();
        assert!((s1 - 0.7311).abs() < 1e-3);
        assert!((g1 - 0.7616).abs() < 1e-3);
        let c_expect = s1 * g1; // forget path is zero at t=0
        let h_expect = s1 * c_expect.tanh();
        let c = cache.cell[0][0];
        let h = cache.hidden[0][0];
        assert!((c - c_expect).abs() < 1e-12);
        assert!((h - h_expect).abs() < 1e-12);
        assert!((c - 0.5568).abs() < 1e-3);
        assert!((h - 0.3699).abs() < 1e-3);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let layer = LstmLayer::zeros(3, 2).unwrap();
        let bad = vec![DVector::zeros(4)];
        assert!(matches!(
            layer.forward(&bad),
            Err(PredictError::InvalidArgument(_))
        ));
        assert!(layer.forward(&[]).is_err());
    }

    /// BPTT gradients against a central finite difference of a quadratic
    /// loss on the hidden states, on random parameters and inputs.
    #[test]
    fn bptt_matches_finite_difference() {
        let eps = 1e-5;
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layer = LstmLayer::init_uniform(3, 4, &mut rng).unwrap();
            let xs: Vec<DVector<f64>> = (0..6)
                .map(|_| DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let targets: Vec<DVector<f64>> = (0..6)
                .map(|_| DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            // loss = 0.5 Σ_t |h_t − y_t|²  ⇒  dh_t = h_t − y_t
            let loss = |layer: &LstmLayer| -> f64 {
                let cache = layer.forward(&xs).unwrap();
                cache
                    .hidden
                    .iter()
                    .zip(&targets)
                    .map(|(h, y)| 0.5 * (h - y).norm_squared())
                    .sum()
            };
            let cache = layer.forward(&xs).unwrap();
            let dh: Vec<DVector<f64>> = cache
                .hidden
                .iter()
                .zip(&targets)
                .map(|(h, y)| h - y)
                .collect();
            let grads = layer.backward(&cache, &dh);

            let mut max_rel = 0.0f64;
            let mut check = |set: &dyn Fn(&mut LstmLayer, f64), analytic: f64| {
                let mut lp = layer.clone();
                set(&mut lp, eps);
                let up = loss(&lp);
                let mut lm = layer.clone();
                set(&mut lm, -eps);
                let dn = loss(&lm);
                let fd = (up - dn) / (2.0 * eps);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            };
            for idx in 0..layer.w.len() {
                check(&|l: &mut LstmLayer, d: f64| l.w[idx] += d, grads.dw[idx]);
            }
            for idx in 0..layer.u.len() {
                check(&|l: &mut LstmLayer, d: f64| l.u[idx] += d, grads.du[idx]);
            }
            for idx in 0..layer.b.len() {
                check(&|l: &mut LstmLayer, d: f64| l.b[idx] += d, grads.db[idx]);
            }
            assert!(
                max_rel <= 1e-4,
                "seed {seed}: max relative gradient error {max_rel:.3e}"
            );
        }
    }

    #[test]
    fn softmax_sums_to_one_and_is_uniform_on_zeros() {
        let p = softmax(&DVector::zeros(3));
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = softmax(&DVector::from_vec(vec![100.0, 100.5, 99.0]));
        assert!((p.sum() - 1.0).abs() < 1e-9);
        assert!(p[1] > p[0] && p[0] > p[2]);
    }
}

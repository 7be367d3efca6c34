//! Central finite-difference gradient checking.

use super::params::{Gradients, ParamSet};
use crate::error::{PvadError, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many (evenly strided) entries per tensor.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-5,
            max_entries_per_param: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error, entries checked)`.
    pub per_param: Vec<(String, f64, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().map(|p| p.1).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64, usize)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let (param, err, _) = self.worst().cloned().expect("failed report has entries");
        Err(PvadError::GradCheck {
            param,
            max_rel_error: err,
        })
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the analytic gradient returned by `loss_and_grad` against
/// central differences for every trainable entry.
pub fn grad_check<F>(params: &ParamSet, mut loss_and_grad: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<(f64, Gradients)>,
{
    let (l0, analytic) = loss_and_grad(params)?;
    let (l1, _) = loss_and_grad(params)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(PvadError::NonDeterministic {
            first: l0,
            second: l1,
        });
    }
    let mut probe = params.clone();
    let mut per_param = Vec::new();
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let n = params.get(&name)?.value.len();
        let stride = match cfg.max_entries_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        let g = analytic.get(&name)?;
        let g_flat: Vec<f64> = g.iter().copied().collect();
        let mut worst = 0.0f64;
        let mut checked = 0;
        for idx in (0..n).step_by(stride) {
            let orig = flat_get(&probe, &name, idx)?;
            flat_set(&mut probe, &name, idx, orig + cfg.step)?;
            let (plus, _) = loss_and_grad(&probe)?;
            flat_set(&mut probe, &name, idx, orig - cfg.step)?;
            let (minus, _) = loss_and_grad(&probe)?;
            flat_set(&mut probe, &name, idx, orig)?;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            worst = worst.max(relative_error(g_flat[idx], numeric));
            checked += 1;
        }
        per_param.push((name, worst, checked));
    }
    Ok(GradCheckReport {
        per_param,
        tolerance: cfg.tolerance,
    })
}

fn flat_get(p: &ParamSet, name: &str, idx: usize) -> Result<f64> {
    let v = &p.get(name)?.value;
    Ok(v.as_slice().map(|s| s[idx]).unwrap_or_else(|| v.iter().nth(idx).copied().unwrap_or(f64::NAN)))
}

fn flat_set(p: &mut ParamSet, name: &str, idx: usize, val: f64) -> Result<()> {
    let v = &mut p.get_mut(name)?.value;
    if let Some(s) = v.as_slice_mut() {
        s[idx] = val;
    } else if let Some(e) = v.iter_mut().nth(idx) {
        *e = val;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{softmax_ce, AttentivePooling, Blstm, Linear, Lstm};
    use crate::rng;
    use ndarray::{Array1, Array2};
    use rand::Rng as _;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, "gc-data", 0);
        Array2::from_shape_simple_fn((rows, cols), || r.gen_range(-1.0..1.0))
    }

    fn weighted_sum_loss(y: &Array2<f64>, w: &Array2<f64>) -> (f64, Array2<f64>) {
        ((y * w).sum(), w.clone())
    }

    #[test]
    fn linear_with_ce() {
        let mut r = rng::stream(1, "gc", 0);
        let lin = Linear::new("lin", 4, 3);
        let mut p = ParamSet::new();
        lin.init(&mut p, &mut r);
        let x = random_matrix(5, 4, 1) * 3.0;
        let labels = [0, 2, 1, 1, 0];
        let f = |p: &ParamSet| {
            let logits = lin.forward(p, x.view())?;
            let ce = softmax_ce(logits.view(), &labels)?;
            let mut g = Gradients::zeros_like(p);
            lin.backward(p, x.view(), ce.grad.view(), &mut g)?;
            Ok((ce.loss, g))
        };
        let report = grad_check(&p, f, GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error() < 1e-7, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut r = rng::stream(1, "gc", 0);
        let lin = Linear::new("lin", 4, 3);
        let mut p = ParamSet::new();
        lin.init(&mut p, &mut r);
        let x = random_matrix(5, 4, 1) * 3.0;
        let labels = [0, 2, 1, 1, 0];
        let f = |p: &ParamSet| {
            let logits = lin.forward(p, x.view())?;
            let ce = softmax_ce(logits.view(), &labels)?;
            let mut g = Gradients::zeros_like(p);
            lin.backward(p, x.view(), ce.grad.view(), &mut g)?;
            g.scale(1.01);
            Ok((ce.loss, g))
        };
        let report = grad_check(&p, f, GradCheckConfig::default()).unwrap();
        assert!(!report.passed());
        assert!(matches!(report.into_result(), Err(PvadError::GradCheck { .. })));
    }

    #[test]
    fn nondeterministic_closure_is_rejected() {
        let mut p = ParamSet::new();
        p.insert_filled("x", &[1], 0.0);
        let mut calls = 0.0;
        let f = |p: &ParamSet| {
            calls += 1.0;
            Ok((calls, Gradients::zeros_like(p)))
        };
        let err = grad_check(&p, f, GradCheckConfig::default()).unwrap_err();
        assert!(matches!(err, PvadError::NonDeterministic { .. }));
    }

    #[test]
    fn lstm_sum_of_hidden_states() {
        let mut r = rng::stream(2, "gc", 0);
        let lstm = Lstm::new("l", 2, 2);
        let mut p = ParamSet::new();
        lstm.init(&mut p, &mut r);
        let x = random_matrix(3, 2, 2);
        let f = |p: &ParamSet| {
            let c = lstm.forward(p, x.view(), None)?;
            let ones = Array2::ones((3, 2));
            let mut g = Gradients::zeros_like(p);
            lstm.backward(p, &c, ones.view(), &mut g)?;
            Ok((c.output().sum(), g))
        };
        let report = grad_check(&p, f, GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error() < 1e-5, "{report:?}");
    }

    #[test]
    fn lstm_with_static_input_and_input_gradient() {
        let mut r = rng::stream(3, "gc", 0);
        let lstm = Lstm::with_static_input("l", 3, 2, 4);
        let mut p = ParamSet::new();
        lstm.init(&mut p, &mut r);
        // treat the input itself as a parameter to check dL/dx
        p.insert("x", random_matrix(6, 3, 3).into_dyn(), true);
        let e = Array1::from_vec(vec![0.4, -0.9]);
        let w = random_matrix(6, 4, 4);
        let f = |p: &ParamSet| {
            let x = p.matrix("x", 6, 3)?.to_owned();
            let c = lstm.forward(p, x.view(), Some(e.view()))?;
            let (loss, dy) = weighted_sum_loss(&c.output().to_owned(), &w);
            let mut g = Gradients::zeros_like(p);
            let dx = lstm.backward(p, &c, dy.view(), &mut g)?;
            g.get_mut("x")?.assign(&dx.into_dyn());
            Ok((loss, g))
        };
        let report = grad_check(&p, f, GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error() < 1e-5, "{report:?}");
    }

    #[test]
    fn blstm_and_attentive_pooling() {
        let mut r = rng::stream(4, "gc", 0);
        let bl = Blstm::new("b", 3, 2);
        let pool = AttentivePooling::new("att", 4, 2);
        let mut p = ParamSet::new();
        bl.init(&mut p, &mut r);
        pool.init(&mut p, &mut r);
        p.insert("x", random_matrix(5, 3, 5).into_dyn(), true);
        let w = Array1::from_vec(vec![0.3, -1.1, 0.8, 0.5]);
        let f = |p: &ParamSet| {
            let x = p.matrix("x", 5, 3)?.to_owned();
            let bc = bl.forward(p, x.view())?;
            let pc = pool.forward(p, bc.output())?;
            let loss = pc.pooled.dot(&w);
            let mut g = Gradients::zeros_like(p);
            let dh = pool.backward(p, &pc, w.view(), &mut g)?;
            let dx = bl.backward(p, &bc, dh.view(), &mut g)?;
            g.get_mut("x")?.assign(&dx.into_dyn());
            Ok((loss, g))
        };
        let report = grad_check(&p, f, GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error() < 1e-5, "{report:?}");
    }
}

//! Central finite-difference verification of tape gradients.
//!
//! The numeric side only evaluates forward values, so it is independent of
//! every backward rule it checks.

use rand::seq::index::sample;
use rand::Rng;

use crate::networks::{Avlae, Bound, NetworkId};
use crate::tensor::{Graph, Result, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates per input to probe; `None` checks all of them.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            max_coords: Some(24),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per input: ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖) over probed coordinates.
    pub rel_errors: Vec<f64>,
    pub coords_checked: usize,
    pub analytic_norms: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).sum())
}

/// Compares backward-pass gradients of the scalar `f(inputs)` with central
/// differences. Non-scalar outputs are summed.
pub fn check_gradients<F, G>(
    inputs: &[Tensor<f64>],
    f: F,
    opts: GradCheckOptions,
    rng: &mut G,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    G: Rng + ?Sized,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let loss = g.sum(out);
    g.backward(loss)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut analytic_norms = Vec::with_capacity(inputs.len());
    let mut coords_checked = 0;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let analytic = g
            .grad(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => sample(rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &j in &coords {
            let orig = probe[k].data()[j];
            probe[k].data_mut()[j] = orig + opts.epsilon;
            let plus = eval(&f, &probe)?;
            probe[k].data_mut()[j] = orig - opts.epsilon;
            let minus = eval(&f, &probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            diff2 += (analytic[j] - numeric).powi(2);
            a2 += analytic[j].powi(2);
            n2 += numeric.powi(2);
        }
        coords_checked += coords.len();
        let scale = a2.sqrt().max(n2.sqrt());
        rel_errors.push(if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale });
        analytic_norms.push(a2.sqrt());
    }
    Ok(GradCheckReport {
        rel_errors,
        coords_checked,
        analytic_norms,
    })
}

/// Like [`check_gradients`], but for the parameters of one network of `model`.
/// `f` builds a value on a graph where the model is already bound.
pub fn check_network<F, G>(
    model: &Avlae<f64>,
    id: NetworkId,
    f: F,
    opts: GradCheckOptions,
    rng: &mut G,
) -> Result<GradCheckReport>
where
    F: Fn(&Avlae<f64>, &mut Graph<f64>, &Bound) -> Result<Var>,
    G: Rng + ?Sized,
{
    let value = |m: &Avlae<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = m.bind(&mut g, &[]);
        let out = f(m, &mut g, &b)?;
        Ok(g.value(out).sum())
    };
    let mut g = Graph::new();
    let b = model.bind(&mut g, &[id]);
    let out = f(model, &mut g, &b)?;
    let loss = g.sum(out);
    g.backward(loss)?;

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        rel_errors: Vec::new(),
        coords_checked: 0,
        analytic_norms: Vec::new(),
    };
    for (k, v) in b.vars(id).iter().enumerate() {
        let n = g.shape(*v).iter().product();
        let analytic = g
            .grad(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => sample(rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &j in &coords {
            let orig = model.params(id).tensors()[k].data()[j];
            probe.params_mut(id).tensors_mut()[k].data_mut()[j] = orig + opts.epsilon;
            let plus = value(&probe)?;
            probe.params_mut(id).tensors_mut()[k].data_mut()[j] = orig - opts.epsilon;
            let minus = value(&probe)?;
            probe.params_mut(id).tensors_mut()[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            diff2 += (analytic[j] - numeric).powi(2);
            a2 += analytic[j].powi(2);
            n2 += numeric.powi(2);
        }
        report.coords_checked += coords.len();
        let scale = a2.sqrt().max(n2.sqrt());
        report.rel_errors.push(if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale });
        report.analytic_norms.push(a2.sqrt());
    }
    Ok(report)
}

//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::Grads;
use super::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// Coordinates checked per tensor; `None` checks all of them.
    pub per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            per_tensor: None,
            seed: 0,
        }
    }
}

impl GradCheck {
    /// Compares the gradients returned by `loss_and_grads` at `params` against
    /// central differences of its loss. `loss_and_grads` must be pure.
    pub fn run<F>(&self, params: &ParamStore, mut loss_and_grads: F) -> GradCheckReport
    where
        F: FnMut(&ParamStore) -> (f64, Grads),
    {
        let (_, analytic) = loss_and_grads(params);
        let mut work = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            checked: 0,
            worst: None,
        };
        for id in 0..params.len() {
            let len = params.value(id).len();
            let coords: Vec<usize> = match self.per_tensor {
                Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
                _ => (0..len).collect(),
            };
            for flat in coords {
                let a = analytic
                    .get(id)
                    .map_or(0.0, |g| g.as_slice().expect("standard layout")[flat]);
                let original = params.value(id).as_slice().expect("standard layout")[flat];
                let mut at = |x: f64, work: &mut ParamStore| {
                    work.value_mut(id).as_slice_mut().expect("standard layout")[flat] = x;
                    loss_and_grads(work).0
                };
                let plus = at(original + self.eps, &mut work);
                let minus = at(original - self.eps, &mut work);
                at(original, &mut work);
                let n = (plus - minus) / (2.0 * self.eps);
                let err = relative_error(a, n);
                report.checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.worst = Some((params.name(id).to_string(), flat, a, n));
                }
            }
        }
        report
    }
}

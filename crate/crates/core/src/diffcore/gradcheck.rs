//! Central finite-difference checks against the reverse sweep.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamRegistry, Session, Tensor, Var};
use crate::error::Result;

/// Magnitudes below this are treated as this value in the relative error.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: String,
}

impl GradCheck {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
        let rel = (analytic - numeric).abs() / scale;
        self.checked += 1;
        if rel > self.max_rel_err || !rel.is_finite() {
            self.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
            self.worst = format!("{} analytic={analytic:e} numeric={numeric:e}", label());
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

fn entries(len: usize, per_input: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match per_input {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Checks `d f / d inputs` for a function built from fresh leaves.
pub fn check_tensors<F>(inputs: &[Tensor], h: f64, per_input: Option<usize>, seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("leaf requires grad").clone();
        for j in entries(inputs[i].len(), per_input, &mut rng) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(|| format!("input {i}[{j}]"), analytic.data()[j], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Same check for registry parameters, perturbing a private copy of the registry.
pub fn check_registry<F>(
    registry: &ParamRegistry,
    ids: &[ParamId],
    h: f64,
    per_input: Option<usize>,
    seed: u64,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut session = Session::new(registry, true);
    let out = f(&mut session)?;
    session.graph.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| {
            session
                .bound(id)
                .and_then(|v| session.graph.grad(v).cloned())
                .unwrap_or_else(|| Tensor::zeros(registry.value(id).shape()))
        })
        .collect();
    drop(session);

    let mut work = registry.clone();
    let eval = |reg: &ParamRegistry| -> Result<f64> {
        let mut s = Session::new(reg, false);
        let out = f(&mut s)?;
        Ok(s.graph.value(out).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck::default();
    for (k, &id) in ids.iter().enumerate() {
        for j in entries(registry.value(id).len(), per_input, &mut rng) {
            let orig = work.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig;
            report.record(
                || format!("{}[{j}]", registry.get(id).name),
                analytic[k].data()[j],
                (up - down) / (2.0 * h),
            );
        }
    }
    Ok(report)
}
